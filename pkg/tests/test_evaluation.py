import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskguard import evaluation as ev
from maskguard.detection import Detector
from maskguard.diffusion import DenoiserConfig, DenoiserParams, NoiseSchedule
from maskguard.errors import ConfigError, DimensionError, InputError
from maskguard.io import read_csv
from maskguard.scenes import BACKGROUNDS, CONCEPTS, ConceptVocabulary, make_dataset
from maskguard.suppression import GuidanceParams, SuppressionConfig

vocab = ConceptVocabulary()


def canvas(hazard_pixels=0, bg="navy"):
    img = np.zeros((32, 32, 3), np.uint8)
    img[:] = BACKGROUNDS[bg]
    img[:4, :4][np.arange(16).reshape(4, 4) < hazard_pixels] = CONCEPTS[0].rgb
    return img


def test_miou_examples():
    a = np.array([[1, 1], [0, 0]])
    assert ev.miou(a, a) == 1.0
    assert ev.miou(a, np.array([[0, 1], [1, 0]])) == pytest.approx(1 / 3)
    assert ev.miou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(InputError):
        ev.miou(a, np.full((2, 2), 0.5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_miou_invariant_under_joint_permutation(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.random(30) < 0.4, rng.random(30) < 0.4
    perm = rng.permutation(30)
    assert ev.miou(p[perm], t[perm].astype(int)) == ev.miou(p, t.astype(int))


def test_suppression_rate_cases():
    hot, cold = canvas(10), canvas(0)
    r = ev.suppression_rate([hot] * 4, [hot, cold, cold, cold], vocab)
    assert (r.base_detections, r.controlled_detections, r.reduction) == (4, 1, 0.75)
    none = ev.suppression_rate([cold] * 3, [cold] * 3, vocab)
    assert not none.applicable and none.reduction is None
    assert ev.suppression_rate([hot], [hot], vocab).reduction == 0.0
    with pytest.raises(DimensionError):
        ev.suppression_rate([hot], [], vocab)


def test_outside_mask_deviation_cases():
    a = np.zeros((32, 32, 3), np.uint8)
    b = a.copy()
    b[:16] = 255
    mask = np.zeros((32, 32))
    assert ev.outside_mask_deviation(a, a, mask) == 0.0
    assert ev.outside_mask_deviation(a, b, mask) == pytest.approx(0.5)
    mask[:16] = 1.0
    assert ev.outside_mask_deviation(a, b, mask) == 0.0
    assert ev.outside_mask_deviation(a, b, np.ones((32, 32))) is None
    with pytest.raises(DimensionError):
        ev.outside_mask_deviation(a, b, np.ones((16, 16)))


def test_hazard_prompts_alternate_concepts():
    ps = ev.hazard_prompts(6, vocab, seed=3)
    named = [next(w for w in vocab.decode(p) if w in vocab.concept_names) for p in ps]
    assert named == ["blaze", "toxin"] * 3
    assert ps == ev.hazard_prompts(6, vocab, seed=3)
    with pytest.raises(InputError):
        ev.hazard_prompts(0, vocab)


def test_report_write_and_summary(tmp_path):
    rep = ev.EvalReport("demo", "score", 0.5, 3, "abc123", ["a", "b"], [[1, 0.25], [2, 0.5], [3, 1.0]],
                        {"ok": True}, {"extra": 2.0})
    path = rep.write(tmp_path)
    assert path.name == "report_demo_abc123.csv" and len(read_csv(path)) == 3
    text = (tmp_path / "report_demo_abc123.txt").read_text()
    assert "score: 0.500000" in text and "check ok: pass" in text
    assert rep.digest() == ev.EvalReport("demo", "x", 0.0, 0, "zzz", ["a", "b"], rep.rows).digest()


TINY = DenoiserConfig(hidden=8, text_dim=8, height=8, width=8)


@pytest.fixture(scope="module")
def tiny():
    base = DenoiserParams.init(TINY, 0)
    det = Detector.init(vocab.concept_names, base, token_dim=8, attn_dim=8)
    return base, det, GuidanceParams.from_base(base)


def test_generate_modes_pair_up(tiny):
    base, det, guid = tiny
    s = NoiseSchedule(T=10)
    prompts = ev.hazard_prompts(4, vocab)
    off = ev.generate(base, det, guid, s, prompts, [0, 1, 2, 3], SuppressionConfig(mode="off"), batch=3)
    rg = ev.generate(base, det, guid, s, prompts, [0, 1, 2, 3], SuppressionConfig(), batch=3)
    assert off.masks is None and len(off.images) == 4
    assert rg.masks.shape == (4, 16, 16) and rg.masks.min() >= 0 and rg.masks.max() <= 1
    # copy-initialised guidance makes every mode reproduce the base samples
    assert all(a.tobytes() == b.tobytes() for a, b in zip(off.images, rg.images))
    with pytest.raises(DimensionError):
        ev.generate(base, det, guid, s, prompts, [0], SuppressionConfig())


def test_sweep_errors(tiny):
    base = DenoiserParams.init(DenoiserConfig(hidden=8, text_dim=8), 0)
    det = Detector.init(vocab.concept_names, base, token_dim=8, attn_dim=8)
    s = NoiseSchedule(T=10)
    with pytest.raises(InputError):
        ev.run_timestep_sweep(det, base, [], s, vocab, "fp")
    scenes = [x for x in make_dataset(20, vocab, seed=0).scenes if x.hazard][:3]
    with pytest.raises(ConfigError):
        ev.run_timestep_sweep(det, base, scenes, s, vocab, "fp", timesteps=[1, 2])


def test_localization_and_sweep_rows():
    base = DenoiserParams.init(DenoiserConfig(hidden=8, text_dim=8), 0)
    det = Detector.init(vocab.concept_names, base, token_dim=8, attn_dim=8)
    s = NoiseSchedule(T=10)
    scenes = [x for x in make_dataset(30, vocab, seed=0).scenes if x.hazard][:4]
    loc = ev.run_localization(det, base, scenes, s, vocab, "fp")
    assert {r[0] for r in loc.rows} == {1, 2} and loc.n == 4
    sw = ev.run_timestep_sweep(det, base, scenes, s, vocab, "fp", timesteps=[1, 5, 9])
    assert sw.value == pytest.approx(sw.notes["miou_late"] - sw.notes["miou_early"])
    assert set(sw.checks) == {"late_exceeds_early"}


def test_ablation_requires_checkpoints(tiny):
    base, det, _ = tiny
    with pytest.raises(ConfigError):
        ev.run_ablation_table(base, det, None, NoiseSchedule(T=10), vocab, "fp")


def test_safety_and_ablation_run_on_tiny_models(tiny, tmp_path):
    base, det, guid = tiny
    s = NoiseSchedule(T=6)
    saf = ev.run_safety(base, det, guid, s, vocab, "fp", n_prompts=4, window=0.5)
    assert len(saf.rows) == 4 and saf.columns[-1] == "controlled_hazard"
    abl = ev.run_ablation_table(base, det, guid, s, vocab, "fp", n_seeds=4, window=0.5)
    assert [r[0] for r in abl.rows] == ["off", "global", "region_guided"]
    assert abl.rows[0][3] == 0.0
    abl.write(tmp_path)
    assert len(read_csv(tmp_path / f"{abl.stem}.csv")) == 3
