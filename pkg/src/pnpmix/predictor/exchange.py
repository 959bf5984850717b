"""Serving noise predictions from an external process through a shared directory.

Protocol: for each request the engine writes ``request.pnpl`` (the latent) and
``request.json`` (``{"t", "cond", "directive"}``), then waits for ``response.pnpl``.
The cooperating process must create ``response.pnpl`` atomically (write elsewhere, then
rename) and should remove the request files once it has read them.  The engine deletes
the response after loading it.
"""

import json
import logging
import os
import threading
import time
from pathlib import Path

from ..attention import QKVBundle
from ..errors import FormatError, IntegrationError
from ..tensor import LatentTensor, load_latent, save_latent
from .base import PredictRequest, Predictor

logger = logging.getLogger(__name__)

REQUEST_LATENT = "request.pnpl"
REQUEST_META = "request.json"
RESPONSE_LATENT = "response.pnpl"


def file_exchange_predict(
    directory: str | os.PathLike[str],
    req: PredictRequest,
    *,
    timeout: float = 30.0,
    poll_interval: float = 0.01,
) -> LatentTensor:
    """Ask the process watching `directory` for ``eps(x_t, t, c)``.

    Raises
    ------
    IntegrationError
        No response appeared within `timeout` seconds.
    FormatError
        The response is not a PNPL file of the request's shape.
    """
    d = Path(directory)
    response = d / RESPONSE_LATENT
    response.unlink(missing_ok=True)

    directive = req.attention_directive
    meta = {
        "t": req.t,
        "cond": req.cond.to_list(),
        "directive": {
            "mode": directive.mode,
            "alpha": directive.alpha,
            "donor_tag": directive.donor_tag,
        },
    }
    save_latent(req.x_t, d / REQUEST_LATENT)
    tmp = d / (REQUEST_META + ".tmp")
    tmp.write_text(json.dumps(meta, sort_keys=True))
    tmp.replace(d / REQUEST_META)
    logger.debug("wrote exchange request t=%d to %s", req.t, d)

    deadline = time.monotonic() + timeout
    while not response.exists():
        if time.monotonic() > deadline:
            raise IntegrationError(f"no response in {d} after {timeout} s (t={req.t})")
        time.sleep(poll_interval)

    try:
        eps = load_latent(response)
    finally:
        response.unlink(missing_ok=True)
    if eps.shape != req.x_t.shape:
        raise FormatError(f"response has shape {eps.shape}, expected {req.x_t.shape}")
    return eps


class FileExchangePredictor(Predictor):
    """A :class:`Predictor` backed by :func:`file_exchange_predict`.

    Requests are serialized, since the exchange directory holds one request at a time.
    Attention bundles never cross the exchange, so guided directives are forwarded as
    metadata only.
    """

    def __init__(self, directory: str | os.PathLike[str], timeout: float = 30.0):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FileNotFoundError(f"file not found: {self.directory}")
        self.timeout = timeout
        self._lock = threading.Lock()

    def predict_with_attention(
        self, req: PredictRequest
    ) -> tuple[LatentTensor, tuple[QKVBundle, ...]]:
        self.check_request(req)
        with self._lock:
            return file_exchange_predict(self.directory, req, timeout=self.timeout), ()

    def __repr__(self) -> str:
        return f"FileExchangePredictor({str(self.directory)!r})"
