"""Pipeline behavior beyond the acceptance checks: configuration, stage
attribution, noisy-mode exclusion bands, slot-level mode agreement."""

import numpy as np
import pytest

from conftest import CFG32, SEED, make_blob16

from fhesift import (
    PipelineConfig,
    SimParams,
    compare_keypoints,
    keypoints_from_text,
    keypoints_to_text,
    run_pipeline,
)
from fhesift.errors import ConfigError, DeferralUnsupported, DepthExhausted
from fhesift.oracle import ambiguous_keypoints, ambiguous_sites, run_with_margins, site_of
from fhesift.sift_pipeline import (
    SQRT_MAGNITUDE,
    Keypoint,
    parse_keypoint_line,
    validate_image,
)

CFG16 = PipelineConfig(octaves=1)


# -- configuration ------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(octaves=0)
    with pytest.raises(ConfigError):
        PipelineConfig(scales_per_octave=0)
    with pytest.raises(ConfigError):
        PipelineConfig(base_sigma=0.0)
    with pytest.raises(ConfigError):
        PipelineConfig(orientation_bins=2)
    with pytest.raises(ConfigError):
        PipelineConfig(descriptor_grid=(2, 2, 8))
    with pytest.raises(ConfigError):
        PipelineConfig(orientation_weighting="cubed")
    with pytest.raises(ConfigError):
        run_pipeline(np.zeros((16, 16)), mode="hybrid")


def test_sigma_ladder_doubles_over_an_octave():
    cfg = PipelineConfig()
    s = cfg.sigmas()
    assert len(s) == cfg.scales_per_octave + 3
    assert s[0] == cfg.base_sigma
    assert s[cfg.scales_per_octave] == pytest.approx(2.0 * cfg.base_sigma)


def test_validate_image():
    with pytest.raises(ConfigError):
        validate_image(np.zeros(16))
    with pytest.raises(ConfigError):
        validate_image(np.full((4, 4), np.nan))
    out = validate_image([[0.0, 1.0], [0.5, 0.25]])
    assert out.dtype == np.float64 and out.shape == (2, 2)


# -- keypoint serialization ----------------------------------------------------------


def test_keypoint_text_round_trip():
    kp = Keypoint(x=12.25, y=3.5, octave=1, scale=1.75, orientation_bin=9,
                  descriptor=tuple(float(i) / 7 for i in range(128)))
    back = parse_keypoint_line(kp.line())
    assert back.key() == kp.key()
    assert back.descriptor == pytest.approx(kp.descriptor, abs=1e-6)
    kps = [kp, Keypoint(1.0, 2.0, 0, 1.0, 3, (0.0,) * 128)]
    assert [k.key() for k in keypoints_from_text(keypoints_to_text(kps))] == \
        [k.key() for k in kps]
    with pytest.raises(ValueError):
        parse_keypoint_line("1.0 2.0 0")


def test_compare_keypoints_reports_asymmetries():
    a = Keypoint(1.0, 2.0, 0, 1.0, 3, (1.0, 0.0))
    b = Keypoint(1.0, 2.0, 0, 1.0, 3, (1.0, 1e-6))
    c = Keypoint(5.0, 5.0, 0, 1.0, 4, (0.5, 0.5))
    d = compare_keypoints([a, c], [b])
    assert d["matched"] == 1
    assert d["only_a"] == [c.key()]
    assert d["only_b"] == []
    assert d["descriptor_mismatches"] == [a.key()]
    assert d["max_descriptor_diff"] == pytest.approx(1e-6)
    assert not d["equal"]
    assert compare_keypoints([a], [a])["equal"]


# -- mode agreement on small images --------------------------------------------------


def test_three_modes_agree_on_16px_blob(blob16):
    rp = run_pipeline(blob16, CFG16, mode="plaintext")
    ri = run_pipeline(blob16, CFG16, mode="interactive", seed=SEED)
    rd = run_pipeline(blob16, CFG16, mode="deferred", seed=SEED)
    assert len(rp.keypoints) == 1
    assert compare_keypoints(rp.keypoints, ri.keypoints)["equal"]
    # the two encrypted modes walk identical float ops: no tolerance at all
    assert compare_keypoints(ri.keypoints, rd.keypoints, descriptor_tol=0.0)["equal"]


def test_rectangular_images_work():
    yy, xx = np.mgrid[0:20, 0:28].astype(np.float64)
    img = np.clip(0.02 + 0.001 * xx + 0.0007 * yy
                  + 0.9 * np.exp(-((yy - 9.3) ** 2 + (xx - 13.6) ** 2) / 18.0), 0, 1)
    rp = run_pipeline(img, CFG16, mode="plaintext")
    rd = run_pipeline(img, CFG16, mode="deferred", seed=SEED)
    assert len(rp.keypoints) >= 1
    assert compare_keypoints(rp.keypoints, rd.keypoints)["equal"]


def test_identical_runs_are_byte_identical_and_seed_independent(blob16):
    a = run_pipeline(blob16, CFG16, mode="deferred", seed=5)
    b = run_pipeline(blob16, CFG16, mode="deferred", seed=5)
    assert keypoints_to_text(a.keypoints) == keypoints_to_text(b.keypoints)
    assert a.report.package_bytes == b.report.package_bytes
    # the protocol seed shuffles wire traffic, never results
    c = run_pipeline(blob16, CFG16, mode="interactive", seed=9)
    assert keypoints_to_text(c.keypoints) == keypoints_to_text(a.keypoints)


# -- stage attribution ----------------------------------------------------------------


@pytest.mark.parametrize("mode", ["interactive", "deferred"])
def test_tiny_budget_dies_in_localization(blob16, mode):
    with pytest.raises(DepthExhausted) as ei:
        run_pipeline(blob16, CFG16, SimParams(depth_budget=2), mode=mode, seed=SEED)
    assert ei.value.stage == "localize"


def test_budget_ten_only_breaks_the_interactive_tournament(blob16):
    sim = SimParams(depth_budget=10)
    with pytest.raises(DepthExhausted) as ei:
        run_pipeline(blob16, CFG16, sim, mode="interactive", seed=SEED)
    assert ei.value.stage == "orient"
    out = run_pipeline(blob16, CFG16, sim, mode="deferred", seed=SEED)
    assert out.report.keypoint_count == 1


def test_second_octave_blurs_exhaust_a_three_level_budget(images):
    with pytest.raises(DepthExhausted) as ei:
        run_pipeline(images["blob32"], CFG32, SimParams(depth_budget=3),
                     mode="deferred", seed=SEED)
    assert ei.value.stage == "scale-space"


def test_reports_carry_per_stage_tables(blob16):
    out = run_pipeline(blob16, CFG16, mode="deferred", seed=SEED)
    r = out.report
    assert set(r.stage_ops) >= {"scale-space", "localize", "orient", "descriptor", "protocol"}
    assert all(v >= 0 for ops in r.stage_ops.values() for v in ops.values())
    assert r.stage_min_level["scale-space"] == 28  # two blur levels per octave
    assert min(r.stage_min_level.values()) >= 0


# -- orientation weighting variants ----------------------------------------------------


def test_sqrt_weighting_runs_interactively_and_matches(blob16):
    cfg = PipelineConfig(octaves=1, orientation_weighting=SQRT_MAGNITUDE)
    rp = run_pipeline(blob16, cfg, mode="plaintext")
    ri = run_pipeline(blob16, cfg, mode="interactive", seed=SEED)
    assert len(rp.keypoints) == 1
    assert compare_keypoints(rp.keypoints, ri.keypoints)["equal"]
    # resolving roots mid-histogram needs an extra round
    assert ri.report.dependency_depth == len(ri.report.rounds)


def test_sqrt_weighting_cannot_ship_deferred(blob16):
    cfg = PipelineConfig(octaves=1, orientation_weighting=SQRT_MAGNITUDE)
    with pytest.raises(DeferralUnsupported):
        run_pipeline(blob16, cfg, mode="deferred", seed=SEED)


# -- shared slots across modes ----------------------------------------------------------


def test_shared_slots_are_bitwise_equal_across_modes(suite_runs):
    si = suite_runs[("blob32", "interactive")].slots
    sd = suite_runs[("blob32", "deferred")].slots
    shared = sorted(set(si) & set(sd))
    assert shared  # masks, determinants, numerators, weight sums, descriptors
    assert not any(k.split("/")[1].startswith("oh") for k in shared)
    for k in shared:
        assert np.array_equal(np.asarray(si[k]), np.asarray(sd[k])), k


def test_onehot_masks_are_exact_indicator_rows(suite_runs):
    slots = suite_runs[("blob32", "interactive")].slots
    oh = [k for k in slots if k.split("/")[1].startswith("oh")]
    assert oh
    by_layer: dict = {}
    for k in oh:
        by_layer.setdefault(k.split("/")[0], []).append(k)
    for layer, keys in by_layer.items():
        stack = np.stack([np.asarray(slots[k]) for k in sorted(keys)])
        assert np.array_equal(np.unique(stack), [0.0, 1.0])
        assert np.all(stack.sum(axis=0) == 1.0)


# -- noisy arithmetic and exclusion bands -------------------------------------------------


def test_noise_only_flips_decisions_inside_the_ambiguity_band(images):
    img = images["blob32"]
    exact_kps, margins = run_with_margins(img, CFG32)
    noisy = run_pipeline(img, CFG32, SimParams(noise_per_mul=1e-12),
                         mode="interactive", seed=SEED)
    eps = 1e-6
    amb_sites = ambiguous_sites(margins, eps)
    amb_kps = ambiguous_keypoints(margins, eps)

    exact_sites = {site_of(kp) for kp in exact_kps}
    noisy_sites = {site_of(kp) for kp in noisy.keypoints}
    assert (exact_sites ^ noisy_sites) <= amb_sites

    noisy_bins = {site_of(kp): kp.orientation_bin for kp in noisy.keypoints}
    for kp in exact_kps:
        site = site_of(kp)
        if kp.key() in amb_kps or site in amb_sites:
            continue
        assert site in noisy_bins
        assert noisy_bins[site] == kp.orientation_bin


def test_exact_mode_has_no_ambiguous_decisions(images):
    for name in ("blob32", "two_blobs32", "ramp_h32"):
        _, margins = run_with_margins(images[name], CFG32)
        assert ambiguous_sites(margins, 0.0) == set()
        assert ambiguous_keypoints(margins, 0.0) == set()
