"""The compositing loop: invert every input, then denoise the output and reference latents.

Each timestep runs five phases in a fixed order: predict noise for every trajectory,
re-synthesize reference noise, mix the output noise through the masks, take one
code-driven step on every latent, and dilute the reference latents.
"""

import hashlib
import logging
import os
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, TypeVar

try:
    from typing import Self
except ImportError:
    from typing_extensions import Self

import networkx as nx
import numpy as np
import polars as pl

from .attention import NO_DIRECTIVE, AttentionDirective, QKVBundle
from .blending import (
    BlendConfig,
    LatentBank,
    background_dilution_legacy,
    background_dilution_pp,
    clone_background,
    mix_noise,
    resynthesize_ref_noise,
)
from .config import get_settings
from .errors import ParameterError, StageError, ValidationError
from .inversion import InversionRecord, apply_final_residual, denoise_step, invert
from .masks import MaskSet, expand_to_rect
from .predictor.base import ConditioningVector, PredictRequest, Predictor
from .schedule import NoiseSchedule
from .tensor import BinaryMask, LatentTensor, save_latent

logger = logging.getLogger(__name__)

_T = TypeVar("_T")
_R = TypeVar("_R")

Stage = Literal["a", "b", "c", "d", "e"]
STAGES: tuple[Stage, ...] = ("a", "b", "c", "d", "e")


@dataclass(frozen=True, eq=False)
class SceneBundle:
    """Everything one compositing run consumes.

    Attributes
    ----------
    back : LatentTensor
        Background latent.
    inpaint : LatentTensor
        Background latent with the concept regions inpainted away.
    pers : tuple[LatentTensor, ...]
        One latent per personal concept.
    maskset : MaskSet
        Concept masks and background mask, at latent resolution.
    cond_back, cond_out : ConditioningVector
        Conditioning for the background trajectories and for the reference latents.
    cond_per : tuple[ConditioningVector, ...]
        Conditioning for each concept latent.
    seed : int
        Seed of the inversion noise draws.
    """

    back: LatentTensor
    inpaint: LatentTensor
    pers: tuple[LatentTensor, ...]
    maskset: MaskSet
    cond_back: ConditioningVector
    cond_out: ConditioningVector
    cond_per: tuple[ConditioningVector, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "pers", tuple(self.pers))
        object.__setattr__(self, "cond_per", tuple(self.cond_per))
        if not self.pers:
            raise ValidationError("a scene needs at least one concept latent")
        for name, x in self.latents().items():
            if x.shape != self.back.shape:
                raise ValidationError(f"{name} has shape {x.shape}, background has {self.back.shape}")
        if self.maskset.n != len(self.pers):
            raise ValidationError(f"{self.maskset.n} object masks for {len(self.pers)} concepts")
        if self.maskset.shape != self.back.spatial_shape:
            raise ValidationError(
                f"masks have shape {self.maskset.shape}, latents have {self.back.spatial_shape}"
            )
        if len(self.cond_per) != len(self.pers):
            raise ValidationError(f"{len(self.cond_per)} concept conditionings for {len(self.pers)} concepts")
        if self.seed < 0:
            raise ValidationError(f"seed must be non-negative, got {self.seed}")

    @property
    def n(self) -> int:
        return len(self.pers)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.back.shape

    def latents(self) -> dict[str, LatentTensor]:
        """Input latents by role: ``back``, ``inpaint``, ``per_1`` .. ``per_n``."""
        return {
            "back": self.back,
            "inpaint": self.inpaint,
            **{f"per_{i + 1}": p for i, p in enumerate(self.pers)},
        }

    def cond_for(self, role: str) -> ConditioningVector:
        if role in ("back", "inpaint"):
            return self.cond_back
        return self.cond_per[int(role.removeprefix("per_")) - 1]

    def without_concept(self, i: int) -> Self:
        """This scene with concept ``i`` (0-based) removed and its mask folded into the background."""
        if self.n == 1:
            raise ParameterError("cannot remove the only concept")
        maskset = self.maskset.without(i)
        return type(self)(
            self.back,
            self.inpaint,
            self.pers[:i] + self.pers[i + 1 :],
            maskset,
            self.cond_back,
            self.cond_out,
            self.cond_per[:i] + self.cond_per[i + 1 :],
            self.seed,
        )


@dataclass
class PipelineTrace:
    """Per-timestep summaries, and optionally snapshots, of the sampling loop's latents."""

    snapshots: bool = True
    rows: list[dict[str, float | int | str]] = field(default_factory=list)
    latents: dict[tuple[int, str], LatentTensor] = field(default_factory=dict)

    def record(self, t: int, name: str, x: LatentTensor) -> None:
        d = x.data.astype(np.float64)
        self.rows.append(
            {"t": t, "name": name, "mean": float(d.mean()), "std": float(d.std()), "max_abs": float(np.abs(d).max())}
        )
        if self.snapshots:
            self.latents[(t, name)] = x

    def to_polars(self) -> pl.DataFrame:
        return pl.DataFrame(
            self.rows,
            schema={"t": pl.Int64, "name": pl.Utf8, "mean": pl.Float64, "std": pl.Float64, "max_abs": pl.Float64},
        )

    def write(self, directory: str | os.PathLike[str]) -> None:
        """Write ``trace.csv`` and one PNPL file per snapshot under ``snapshots/``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.to_polars().write_csv(d / "trace.csv")
        if self.latents:
            snap = d / "snapshots"
            snap.mkdir(exist_ok=True)
            for (t, name), x in self.latents.items():
                save_latent(x, snap / f"t{t:04d}_{name}.pnpl")


@dataclass(frozen=True, eq=False)
class BlendResult:
    """Output of a compositing run together with the background it must preserve."""

    out: LatentTensor
    back_recon: LatentTensor
    records: dict[str, InversionRecord]
    config: BlendConfig
    trace: PipelineTrace | None = None

    def background_error(self, maskset: MaskSet) -> float:
        return background_error(self.out, self.back_recon, maskset)


@contextmanager
def _stage(name: str, t: int | None) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, t, e) from e


def _map(pool: ThreadPoolExecutor | None, fn: Callable[[_T], _R], items: Sequence[_T]) -> list[_R]:
    if pool is None:
        return [fn(x) for x in items]
    return list(pool.map(fn, items))


def role_seed(seed: int, k: int) -> int:
    """Noise seed of the `k`-th input latent of a scene seeded with `seed`."""
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def invert_scene(
    bundle: SceneBundle,
    sched: NoiseSchedule,
    predictor: Predictor,
    *,
    threads: int | None = None,
) -> dict[str, InversionRecord]:
    """Invert every input latent, keyed by role.

    Each role draws its noise from its own seed, derived from the scene seed and the
    role's position in :meth:`SceneBundle.latents`.

    Raises
    ------
    StageError
        An inversion failed; the stage names the role, e.g. ``invert:per_2``.
    """
    records = {}
    for k, (role, x_0) in enumerate(bundle.latents().items()):
        with _stage(f"invert:{role}", None):
            records[role] = invert(
                x_0, sched, predictor, bundle.cond_for(role), role_seed(bundle.seed, k), threads=threads
            )
    logger.info("inverted %d latents over %d steps", len(records), sched.T)
    return records


def initial_bank(bundle: SceneBundle, records: dict[str, InversionRecord]) -> LatentBank:
    """Bank at ``t = T``: output and references cloned from the background's ``x_T``."""
    T = records["back"].T
    out, refs = clone_background(records["back"].x(T), bundle.n)
    return LatentBank(
        out=out,
        refs=refs,
        back=records["back"].x(T),
        inpaint=records["inpaint"].x(T),
        pers=[records[f"per_{i + 1}"].x(T) for i in range(bundle.n)],
        t=T,
    )


def prepare(
    bundle: SceneBundle,
    sched: NoiseSchedule,
    predictor: Predictor,
    *,
    threads: int | None = None,
) -> tuple[dict[str, InversionRecord], LatentBank]:
    """Invert the scene's ``n + 2`` latents and initialize the latent bank."""
    records = invert_scene(bundle, sched, predictor, threads=threads)
    return records, initial_bank(bundle, records)


def prediction_graph(n: int) -> nx.DiGraph:
    """Dependencies between the noise predictions of one timestep.

    Reference pass ``ref_i`` needs the attention bundles of concept pass ``per_i``; every
    other pass is independent.
    """
    g = nx.DiGraph()
    g.add_nodes_from(["back", "inpaint"])
    for i in range(1, n + 1):
        g.add_edge(f"per_{i}", f"ref_{i}")
    return g


def _expanded_masks(maskset: MaskSet, cfg: BlendConfig) -> list[BinaryMask]:
    if cfg.dilution is None:
        return []
    return [expand_to_rect(m, cfg.me_margin) for m in maskset.objects]


def blend(
    bundle: SceneBundle,
    sched: NoiseSchedule,
    predictor: Predictor,
    cfg: BlendConfig | None = None,
    *,
    records: dict[str, InversionRecord] | None = None,
    trace: PipelineTrace | None = None,
    threads: int | None = None,
) -> BlendResult:
    """Composite the concepts into the background.

    Parameters
    ----------
    bundle : SceneBundle
        Input latents, masks and conditioning.
    sched : NoiseSchedule
        Schedule used for inversion and sampling.
    predictor : Predictor
        Noise predictor.
    cfg : BlendConfig, optional
        Guidance scales and stage toggles; defaults to the full method.
    records : dict[str, InversionRecord], optional
        Inversion records from :func:`invert_scene`, to reuse across runs.
    trace : PipelineTrace, optional
        Filled with per-timestep summaries when given.
    threads : int, optional
        Concurrent predictor calls; defaults to the engine setting.

    Returns
    -------
    BlendResult

    Raises
    ------
    StageError
        Any failure, tagged with the stage and timestep.
    """
    cfg = cfg or BlendConfig()
    threads = threads or get_settings().threads
    if records is None:
        records = invert_scene(bundle, sched, predictor, threads=threads)
    elif (T := records["back"].T) != sched.T:
        raise ParameterError(f"records have {T} steps, schedule has {sched.T}")
    with _stage("prepare", None):
        bank = initial_bank(bundle, records)
        bank.expanded = _expanded_masks(bundle.maskset, cfg)
    generations = [sorted(gen) for gen in nx.topological_generations(prediction_graph(bundle.n))]
    back_rec = records["back"]

    logger.info(
        "blending %d concepts over %d steps (alpha=%g, beta=%g, dilution=%s, ref_noise_mix=%s)",
        bundle.n, sched.T, cfg.alpha, cfg.beta, cfg.dilution, cfg.ref_noise_mix,
    )

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in sched.timesteps:
            _blend_step(bundle, sched, predictor, cfg, bank, records, generations, t, pool, trace)
    finally:
        if pool is not None:
            pool.shutdown()

    with _stage("finish", 0):
        out = apply_final_residual(bank.out, back_rec)
        back_recon = apply_final_residual(bank.back, back_rec)
    if trace is not None:
        trace.record(0, "out", out)
        trace.record(0, "back", back_recon)
    return BlendResult(out, back_recon, records, cfg, trace)


def _blend_step(
    bundle: SceneBundle,
    sched: NoiseSchedule,
    predictor: Predictor,
    cfg: BlendConfig,
    bank: LatentBank,
    records: dict[str, InversionRecord],
    generations: list[list[str]],
    t: int,
    pool: ThreadPoolExecutor | None,
    trace: PipelineTrace | None,
) -> None:
    eps: dict[str, LatentTensor] = {}
    bundles: dict[str, tuple[QKVBundle, ...]] = {}

    def predict(node: str) -> tuple[str, LatentTensor, tuple[QKVBundle, ...]]:
        kind, _, idx = node.partition("_")
        with _stage(f"predict:{node}", t):
            match kind:
                case "back":
                    req = PredictRequest(bank.back, t, bundle.cond_back)
                case "inpaint":
                    req = PredictRequest(bank.inpaint, t, bundle.cond_back)
                case "per":
                    req = PredictRequest(bank.pers[int(idx) - 1], t, bundle.cond_per[int(idx) - 1])
                case "ref":
                    req = PredictRequest(
                        bank.refs[int(idx) - 1], t, bundle.cond_out, _ref_directive(cfg, bundles[f"per_{idx}"], idx)
                    )
                case _:
                    raise ParameterError(f"unknown prediction node {node!r}")
            e, captured = predictor.predict_with_attention(req)
        return node, e, captured

    for gen in generations:
        for node, e, captured in _map(pool, predict, gen):
            eps[node] = e
            bundles[node] = captured

    n = bundle.n
    eps_refs = [eps[f"ref_{i + 1}"] for i in range(n)]
    with _stage("resynthesize", t):
        if cfg.ref_noise_mix:
            eps_refs = [
                resynthesize_ref_noise(e, eps["back"], m) for e, m in zip(eps_refs, bundle.maskset.objects)
            ]
    with _stage("mix", t):
        eps_gui = mix_noise(eps["back"], eps_refs, bundle.maskset)

    back_z = records["back"].code(t)
    with _stage("step", t):
        bank.out = denoise_step(bank.out, back_z, sched, t, eps_gui)
        bank.refs = [denoise_step(r, back_z, sched, t, e) for r, e in zip(bank.refs, eps_refs)]
        bank.back = denoise_step(bank.back, back_z, sched, t, eps["back"])
        bank.inpaint = denoise_step(bank.inpaint, records["inpaint"].code(t), sched, t, eps["inpaint"])
        bank.pers = [
            denoise_step(p, records[f"per_{i + 1}"].code(t), sched, t, eps[f"per_{i + 1}"])
            for i, p in enumerate(bank.pers)
        ]
    with _stage("dilute", t):
        match cfg.dilution:
            case "pp":
                bank.refs = [
                    background_dilution_pp(bank.inpaint, r, m_e, cfg.beta, convex=cfg.dilution_convex)
                    for r, m_e in zip(bank.refs, bank.expanded)
                ]
            case "legacy":
                bank.refs = [
                    background_dilution_legacy(bank.back, r, m_e, cfg.beta, convex=cfg.dilution_convex)
                    for r, m_e in zip(bank.refs, bank.expanded)
                ]
    bank.t = t - 1

    if trace is not None:
        trace.record(t, "eps_back", eps["back"])
        trace.record(t, "eps_gui", eps_gui)
        trace.record(t - 1, "out", bank.out)
        trace.record(t - 1, "back", bank.back)
        for i, r in enumerate(bank.refs, start=1):
            trace.record(t - 1, f"ref_{i}", r)
    logger.debug("t=%d: max |out - back| = %.3g", t, bank.out.max_abs_diff(bank.back))


def _ref_directive(cfg: BlendConfig, donor: tuple[QKVBundle, ...], idx: str) -> AttentionDirective:
    if not cfg.attention_injection or not donor:
        return NO_DIRECTIVE
    return AttentionDirective("guided", donor, f"per_{idx}", cfg.effective_alpha)


def run(
    bundle: SceneBundle,
    sched: NoiseSchedule,
    predictor: Predictor,
    cfg: BlendConfig | None = None,
    **kwargs: Any,
) -> LatentTensor:
    """Output latent of :func:`blend`."""
    return blend(bundle, sched, predictor, cfg, **kwargs).out


def ablation_config(stage: str, base: BlendConfig | None = None) -> BlendConfig:
    """Toggle set of an ablation stage, keeping the scales of `base`.

    ``a``: noise mixing with key/value replacement only; ``b``: plus value guidance;
    ``c``: plus legacy dilution; ``d``: plus reference noise mixing; ``e``: ``d`` with
    dilution towards the inpainted background.
    """
    base = base or BlendConfig()
    toggles = {
        "a": dict(value_guidance=False, dilution_legacy=False, dilution_pp=False, ref_noise_mix=False),
        "b": dict(value_guidance=True, dilution_legacy=False, dilution_pp=False, ref_noise_mix=False),
        "c": dict(value_guidance=True, dilution_legacy=True, dilution_pp=False, ref_noise_mix=False),
        "d": dict(value_guidance=True, dilution_legacy=True, dilution_pp=False, ref_noise_mix=True),
        "e": dict(value_guidance=True, dilution_legacy=False, dilution_pp=True, ref_noise_mix=True),
    }
    if stage not in toggles:
        raise ParameterError(f"unknown ablation stage {stage!r}; expected one of {', '.join(STAGES)}")
    return BlendConfig(**(base.model_dump() | {"attention_injection": True} | toggles[stage]))


def run_ablation(
    bundle: SceneBundle,
    sched: NoiseSchedule,
    predictor: Predictor,
    stage: str,
    base: BlendConfig | None = None,
    **kwargs: Any,
) -> LatentTensor:
    """Output of :func:`run` under the toggles of ablation `stage`, scales taken from `base`."""
    return run(bundle, sched, predictor, ablation_config(stage, base), **kwargs)


def background_error(out: LatentTensor, back_recon: LatentTensor, maskset: MaskSet) -> float:
    """Largest deviation of `out` from the reconstructed background on the background mask."""
    return out.max_abs_diff(back_recon, mask=maskset.background)


def latent_digest(x: LatentTensor) -> str:
    """SHA-256 of the little-endian float32 payload."""
    return hashlib.sha256(x.data.astype("<f4").tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class AblationReport:
    """Outputs of all ablation stages and a summary table."""

    outputs: dict[str, LatentTensor]
    table: pl.DataFrame


def ablation_ladder(
    bundle: SceneBundle,
    sched: NoiseSchedule,
    predictor: Predictor,
    base: BlendConfig | None = None,
    *,
    threads: int | None = None,
) -> AblationReport:
    """Run every ablation stage on one set of inversion records.

    The table has one row per stage: ``stage``, ``sha256``, ``diff_prev`` (max-abs
    difference from the previous stage's output, null for the first) and
    ``background_error``.
    """
    records = invert_scene(bundle, sched, predictor, threads=threads)
    outputs = {}
    rows = []
    prev = None
    for stage in STAGES:
        res = blend(bundle, sched, predictor, ablation_config(stage, base), records=records, threads=threads)
        outputs[stage] = res.out
        rows.append(
            {
                "stage": stage,
                "sha256": latent_digest(res.out),
                "diff_prev": None if prev is None else res.out.max_abs_diff(prev),
                "background_error": res.background_error(bundle.maskset),
            }
        )
        prev = res.out
    table = pl.DataFrame(
        rows,
        schema={"stage": pl.Utf8, "sha256": pl.Utf8, "diff_prev": pl.Float64, "background_error": pl.Float64},
    )
    return AblationReport(outputs, table)


def sweep(
    bundle: SceneBundle,
    sched: NoiseSchedule,
    predictor: Predictor,
    alphas: Sequence[float],
    betas: Sequence[float],
    base: BlendConfig | None = None,
    *,
    threads: int | None = None,
) -> pl.DataFrame:
    """Run the pipeline over an ``alpha x beta`` grid.

    Returns
    -------
    pl.DataFrame
        One row per grid point and concept: ``alpha``, ``beta``, ``concept`` (1-based),
        ``concept_shift`` (mean ``|out - back|`` inside the concept mask) and
        ``background_error``.
    """
    if not alphas or not betas:
        raise ParameterError("sweep needs at least one alpha and one beta")
    base = base or BlendConfig()
    records = invert_scene(bundle, sched, predictor, threads=threads)
    rows = []
    for alpha in alphas:
        for beta in betas:
            cfg = BlendConfig(**(base.model_dump() | {"alpha": alpha, "beta": beta}))
            res = blend(bundle, sched, predictor, cfg, records=records, threads=threads)
            err = res.background_error(bundle.maskset)
            diff = np.abs(res.out.data.astype(np.float64) - bundle.back.data.astype(np.float64))
            for i, m in enumerate(bundle.maskset.objects, start=1):
                rows.append(
                    {
                        "alpha": float(alpha),
                        "beta": float(beta),
                        "concept": i,
                        "concept_shift": float(diff[:, m.bits].mean()) if m.count() else 0.0,
                        "background_error": err,
                    }
                )
    logger.info("swept %d alpha x %d beta values", len(alphas), len(betas))
    return pl.DataFrame(rows)
