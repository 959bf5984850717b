import numpy as np
from numpy.testing import assert_array_equal

from pnpmix._util import channel_to_uint8, plot_latent_channel, save_previews
from pnpmix.masks import load_mask_pgm
from pnpmix.tensor import BinaryMask, LatentTensor


def test_channel_to_uint8():
    assert_array_equal(channel_to_uint8(np.array([[-1.0, 0.0], [1.0, 3.0]])), [[0, 64], [128, 255]])
    assert_array_equal(channel_to_uint8(np.full((2, 2), 7.0)), 0)


def test_save_previews(tmp_path):
    x = LatentTensor(np.stack([np.zeros((3, 3)), np.eye(3)]))
    paths = save_previews(x, tmp_path / "img")
    assert [p.name for p in paths] == ["img_c0.pgm", "img_c1.pgm"]
    # min-max scaling of the identity is a valid binary mask
    assert_array_equal(load_mask_pgm(paths[1]).bits, np.eye(3, dtype=bool))


def test_plot_latent_channel():
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    x = LatentTensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4))
    ax = plot_latent_channel(x, mask=BinaryMask(np.eye(4, dtype=bool)))
    assert ax.get_aspect() == 1.0
    plt.close(ax.figure)
