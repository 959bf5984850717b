import numpy as np
import polars as pl
import pytest

from conftest import random_latent, random_toy
from pnpmix.blending import BlendConfig
from pnpmix.errors import NumericError, StageError, ValidationError
from pnpmix.masks import MaskSet
from pnpmix.pipeline import (
    STAGES,
    PipelineTrace,
    SceneBundle,
    ablation_config,
    ablation_ladder,
    blend,
    invert_scene,
    prediction_graph,
    prepare,
    role_seed,
    run,
    run_ablation,
    sweep,
)
from pnpmix.predictor import (
    ConditioningVector,
    IdentityScalePredictor,
    ToyConfig,
    ToyDenoiser,
    ToyPredictor,
    ZeroPredictor,
    make_blob_dataset,
    train_toy,
)
from pnpmix.predictor.base import Predictor
from pnpmix.scene import load_scene, make_scene
from pnpmix.schedule import build_schedule
from pnpmix.tensor import BinaryMask, LatentTensor


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    path = make_scene(tmp_path_factory.mktemp("scene"), size=16, n=2, seed=1, T=20)
    manifest, bundle = load_scene(path)
    return manifest, bundle


@pytest.fixture(scope="module")
def sched20():
    return build_schedule(20, 1e-4, 0.02)


class FailingPredictor(Predictor):
    """Raises once the timestep drops to `t_fail`."""

    def __init__(self, t_fail):
        self.t_fail = t_fail

    def predict_with_attention(self, req):
        if req.t <= self.t_fail:
            raise NumericError("diverged", timestep=req.t)
        return LatentTensor.zeros(*req.x_t.shape), ()


def with_seed(bundle, seed):
    return SceneBundle(
        bundle.back, bundle.inpaint, bundle.pers, bundle.maskset,
        bundle.cond_back, bundle.cond_out, bundle.cond_per, seed,
    )


@pytest.mark.parametrize("seed", [1, 2, 3])
@pytest.mark.parametrize("stage", STAGES)
def test_background_is_preserved(scene, sched20, toy16, stage, seed):
    _, bundle = scene
    bundle = with_seed(bundle, seed)
    res = blend(bundle, sched20, toy16, ablation_config(stage))
    assert res.background_error(bundle.maskset) <= 1e-4
    assert res.back_recon.max_abs_diff(bundle.back) <= 1e-4


def test_zero_predictor_without_guidance_returns_background(scene, sched20):
    _, bundle = scene
    cfg = BlendConfig(attention_injection=False, dilution_pp=False, ref_noise_mix=False)
    res = blend(bundle, sched20, ZeroPredictor(), cfg)
    assert res.out.bit_equal(res.back_recon)


def test_blend_is_deterministic(scene, sched20, toy16):
    _, bundle = scene
    assert run(bundle, sched20, toy16).bit_equal(run(bundle, sched20, toy16))


def test_threaded_blend_matches(scene, sched20, toy16):
    _, bundle = scene
    assert run(bundle, sched20, toy16, threads=1).bit_equal(run(bundle, sched20, toy16, threads=3))


def test_prepare(scene, sched20, toy16):
    _, bundle = scene
    records, bank = prepare(bundle, sched20, toy16)
    assert sorted(records) == ["back", "inpaint", "per_1", "per_2"]
    assert len(bank.refs) == 2
    assert all(x.bit_equal(records["back"].x(20)) for x in [bank.out, *bank.refs])
    assert bank.inpaint.bit_equal(records["inpaint"].x(20))
    assert bank.t == 20
    assert records["per_1"].seed == role_seed(bundle.seed, 2)
    assert len({r.seed for r in records.values()}) == 4


def test_prediction_graph():
    g = prediction_graph(2)
    assert set(g.edges) == {("per_1", "ref_1"), ("per_2", "ref_2")}
    assert set(g.nodes) == {"back", "inpaint", "per_1", "per_2", "ref_1", "ref_2"}


def test_scene_bundle_validation(scene):
    _, b = scene
    with pytest.raises(ValidationError):
        SceneBundle(b.back, LatentTensor.zeros(1, 8, 8), b.pers, b.maskset, b.cond_back, b.cond_out, b.cond_per)
    with pytest.raises(ValidationError):
        SceneBundle(b.back, b.inpaint, b.pers[:1], b.maskset, b.cond_back, b.cond_out, b.cond_per[:1])
    with pytest.raises(ValidationError):
        SceneBundle(b.back, b.inpaint, (), b.maskset, b.cond_back, b.cond_out, ())
    small = MaskSet.from_objects([b.maskset.objects[0]])
    with pytest.raises(ValidationError):
        SceneBundle(b.back, b.inpaint, b.pers, small, b.cond_back, b.cond_out, b.cond_per)


def test_default_config_is_stage_e(scene, sched20, toy16):
    _, bundle = scene
    assert ablation_config("e") == BlendConfig()
    assert run(bundle, sched20, toy16).bit_equal(run_ablation(bundle, sched20, toy16, "e"))


def test_unknown_stage(scene):
    with pytest.raises(ValueError):
        ablation_config("f")


def test_ablation_ladder(scene, sched20, toy16):
    _, bundle = scene
    report = ablation_ladder(bundle, sched20, toy16)
    table = report.table
    assert table.get_column("stage").to_list() == list(STAGES)
    assert table.get_column("sha256").n_unique() == 5
    assert table.get_column("diff_prev")[0] is None
    assert (table.get_column("diff_prev").drop_nulls() > 0).all()
    assert (table.get_column("background_error") <= 1e-4).all()


@pytest.mark.slow
def test_ablation_ladder_trained(sched50, tmp_path):
    model = ToyDenoiser(ToyConfig(height=16, width=16, model_width=16), seed=0)
    train_toy(model, make_blob_dataset(64, (1, 16, 16), seed=0), sched50, steps=300, lr=0.02, seed=0)
    _, bundle = load_scene(make_scene(tmp_path, size=16, n=2, seed=4))
    report = ablation_ladder(bundle, sched50, ToyPredictor(model))
    assert (report.table.get_column("diff_prev").drop_nulls() > 1e-3).all()


def test_legacy_dilution_equals_pp_on_shared_trajectory(scene, sched20, toy16):
    _, bundle = scene
    records = invert_scene(bundle, sched20, toy16)
    records["inpaint"] = records["back"]
    c = ablation_config("c")
    pp = BlendConfig(**(c.model_dump() | {"dilution_legacy": False, "dilution_pp": True}))
    a = blend(bundle, sched20, toy16, c, records=records)
    b = blend(bundle, sched20, toy16, pp, records=records)
    assert a.out.bit_equal(b.out)


def test_removing_a_concept_leaves_the_rest(scene, sched20):
    _, bundle = scene
    pred = IdentityScalePredictor(0.1)
    cfg = BlendConfig(attention_injection=False)
    full = run(bundle, sched20, pred, cfg)
    reduced = run(bundle.without_concept(0), sched20, pred, cfg)
    outside = bundle.maskset.objects[0].complement()
    assert full.max_abs_diff(reduced, mask=outside) <= 1e-4
    assert bundle.without_concept(0).n == 1


def test_failures_name_stage_and_step(scene, sched20):
    _, bundle = scene
    records = invert_scene(bundle, sched20, ZeroPredictor())
    with pytest.raises(StageError) as info:
        blend(bundle, sched20, FailingPredictor(7), records=records)
    assert info.value.stage == "predict:back"
    assert info.value.timestep == 7
    assert isinstance(info.value.cause, NumericError)

    with pytest.raises(StageError) as info:
        invert_scene(bundle, sched20, FailingPredictor(3))
    assert info.value.stage == "invert:back"


def test_records_must_match_schedule(scene, sched20, sched3):
    _, bundle = scene
    records = invert_scene(bundle, sched3, ZeroPredictor())
    with pytest.raises(ValueError):
        blend(bundle, sched20, ZeroPredictor(), records=records)


def test_trace(scene, sched20, toy16, tmp_path):
    _, bundle = scene
    trace = PipelineTrace()
    blend(bundle, sched20, toy16, trace=trace)
    df = trace.to_polars()
    assert set(df.get_column("name").unique()) >= {"out", "back", "eps_gui", "ref_1", "ref_2"}
    assert df.filter(pl.col("name") == "out").height == 21
    trace.write(tmp_path / "trace")
    assert pl.read_csv(tmp_path / "trace" / "trace.csv").height == df.height
    assert (tmp_path / "trace" / "snapshots" / "t0000_out.pnpl").exists()


def test_sweep(scene, sched20, toy16):
    _, bundle = scene
    df = sweep(bundle, sched20, toy16, [0.0, 0.3], [0.5, 0.8])
    assert df.height == 8
    assert df.columns == ["alpha", "beta", "concept", "concept_shift", "background_error"]
    assert (df.get_column("background_error") <= 1e-4).all()
    with pytest.raises(ValueError):
        sweep(bundle, sched20, toy16, [], [0.8])


def test_runs_on_other_shapes(sched20):
    rng = np.random.default_rng(0)
    pred = random_toy((2, 8, 8), seed=5, model_width=8)
    bits = np.zeros((8, 8), dtype=bool)
    bits[2:5, 3:6] = True
    cond = ConditioningVector.one_hot(0, 2)
    bundle = SceneBundle(
        random_latent(rng, (2, 8, 8)), random_latent(rng, (2, 8, 8)), (random_latent(rng, (2, 8, 8)),),
        MaskSet.from_objects([BinaryMask(bits)]), cond, cond, (cond,), seed=9,
    )
    res = blend(bundle, sched20, pred)
    assert res.out.shape == (2, 8, 8)
    assert res.background_error(bundle.maskset) <= 1e-4
