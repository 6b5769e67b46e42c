import numpy as np
import pytest

from toneflow import latents, synth
from toneflow.editing import (
    AttentionCache,
    EditConfig,
    correspondence,
    edit,
    edit_clip,
    guided_velocity,
    invert_and_cache,
    sweep,
)
from toneflow.errors import CacheMissError
from toneflow.flow import FlowState, TimeGrid, integrate
from toneflow.net import Conditioning, NetConfig, VelocityNet, init_params
from toneflow.solver import SolverConfig

SMALL = NetConfig(
    model_dim=32,
    head_count=2,
    double_blocks=1,
    single_blocks=2,
    audio_tokens=8,
    text_tokens=2,
    channels=8,
    time_features=8,
    seed=3,
)


def randomized_net(cfg=SMALL, seed=7, scale=0.05):
    rng = np.random.default_rng(seed)
    params = init_params(cfg)
    for name in params:
        params[name] = params[name] + rng.normal(0.0, scale, size=params[name].shape)
    return VelocityNet(cfg, params)


class CountingNet:
    """Transparent wrapper counting conditional and null forward passes."""

    def __init__(self, net):
        self.net = net
        self.config = net.config
        self.cond_calls = 0
        self.null_calls = 0

    def forward(self, z, t, cond=None, tap=None):
        if cond is not None and np.all(cond.token_ids == 8):
            self.null_calls += 1
        else:
            self.cond_calls += 1
        return self.net.forward(z, t, cond, tap)


class ConstantPairNet:
    """Stub with two fixed scalar outputs keyed by conditioning."""

    def __init__(self, cond_value, null_value):
        self.cond_value = cond_value
        self.null_value = null_value

    def forward(self, z, t, cond=None, tap=None):
        value = self.null_value if (cond is None or cond.is_null) else self.cond_value
        return np.full_like(np.asarray(z, dtype=np.float64), value)


def sample_state(cfg=SMALL, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (cfg.audio_tokens, cfg.channels) if batch is None else (batch, cfg.audio_tokens, cfg.channels)
    z = rng.normal(size=shape)
    cond = Conditioning.for_labels(1, 2)
    return z, cond


def test_guided_velocity_collapse_bitwise():
    net = randomized_net()
    z, cond = sample_state()
    null = Conditioning.null()
    assert np.array_equal(guided_velocity(net, z, 0.3, cond, null, 1.0), net.forward(z, 0.3, cond))
    assert np.array_equal(guided_velocity(net, z, 0.3, cond, null, 0.0), net.forward(z, 0.3, null))


def test_guided_velocity_scalar_arithmetic():
    stub = ConstantPairNet(cond_value=2.0, null_value=1.0)
    z = np.zeros((4, 4))
    out = guided_velocity(stub, z, 0.5, Conditioning.for_labels(0, 0), Conditioning.null(), 20.0)
    assert np.all(out == 21.0)  # 1 + 20 * (2 - 1)


def test_guided_velocity_evaluation_counts():
    counting = CountingNet(randomized_net())
    z, cond = sample_state()
    null = Conditioning.null()
    guided_velocity(counting, z, 0.2, cond, null, 1.0)
    assert (counting.cond_calls, counting.null_calls) == (1, 0)
    guided_velocity(counting, z, 0.2, cond, null, 0.0)
    assert (counting.cond_calls, counting.null_calls) == (1, 1)
    guided_velocity(counting, z, 0.2, cond, null, 7.0)
    assert (counting.cond_calls, counting.null_calls) == (2, 2)


def test_correspondence_endpoints_and_involution():
    assert correspondence(0, 25) == 24
    assert correspondence(24, 25) == 0
    for j in range(25):
        assert correspondence(correspondence(j, 25), 25) == j
    with pytest.raises(ValueError):
        correspondence(25, 25)
    with pytest.raises(ValueError):
        correspondence(-1, 25)


def test_invert_cache_count_invariant():
    net = randomized_net()
    z, cond = sample_state()
    for n, m in ((0, 1), (2, 1), (3, 2), (6, 2)):
        cfg = EditConfig(step_count=6, strategy="KV", injection_steps=n, injection_block_start=m, solver="euler")
        _, cache, _ = invert_and_cache(net, z, cond, cfg)
        assert len(cache.entries) == n * (SMALL.single_blocks - m + 1)
        cache.validate()


def test_invert_conditional_call_counts():
    # With source guidance 1 the null branch is never evaluated; the
    # second-order stepper costs exactly two conditional calls per step.
    z, cond = sample_state()
    for solver, expected in (("euler", 6), ("rf2", 12)):
        counting = CountingNet(randomized_net())
        cfg = EditConfig(step_count=6, strategy="none", solver=solver, source_cfg=1.0)
        invert_and_cache(counting, z, cond, cfg)
        assert counting.cond_calls == expected
        assert counting.null_calls == 0


def test_invert_no_injection_matches_plain_inversion():
    net = randomized_net()
    z, cond = sample_state()
    cfg = EditConfig(step_count=5, strategy="none", solver="rf2", delta_t=0.01)
    noise, cache, trajectory = invert_and_cache(net, z, cond, cfg)
    assert len(cache.entries) == 0
    assert len(trajectory) == cfg.step_count + 1

    from toneflow.solver import invert as solver_invert

    field = lambda zz, tt, cc: net.forward(zz, tt, cond)
    plain = solver_invert(field, z, TimeGrid.uniform(5, "reverse"), "rf2", config=SolverConfig(delta_t=0.01))
    assert np.max(np.abs(noise - plain.noise_latent)) <= 1e-12


def test_record_all_filter_matches_direct_recording():
    net = randomized_net()
    z, cond = sample_state()
    base = EditConfig(step_count=6, strategy="V", injection_steps=3, injection_block_start=2, solver="euler")
    _, direct, _ = invert_and_cache(net, z, cond, base)
    _, full, _ = invert_and_cache(net, z, cond, base, record_all=True)
    filtered = full.filtered(3, 2)
    assert set(filtered.entries) == set(direct.entries)
    for key in direct.entries:
        assert np.array_equal(direct.entries[key]["k"], filtered.entries[key]["k"])
        assert np.array_equal(direct.entries[key]["v"], filtered.entries[key]["v"])


def test_edit_requires_consistent_cache():
    net = randomized_net()
    z, cond = sample_state()
    cfg = EditConfig(step_count=6, strategy="KV", injection_steps=2, injection_block_start=1, solver="euler")
    noise, cache, _ = invert_and_cache(net, z, cond, cfg)

    bigger = EditConfig(step_count=6, strategy="KV", injection_steps=4, injection_block_start=1, solver="euler")
    with pytest.raises(CacheMissError):
        edit(net, noise, cache, cond, bigger)

    wrong_steps = EditConfig(step_count=8, strategy="KV", injection_steps=2, injection_block_start=1, solver="euler")
    with pytest.raises(CacheMissError):
        edit(net, noise, cache, cond, wrong_steps)

    with pytest.raises(CacheMissError):
        edit(net, noise, None, cond, cfg)


def test_edit_no_injection_matches_plain_generation():
    net = randomized_net()
    z, cond = sample_state()
    target = Conditioning.for_labels(3, 0)
    cfg = EditConfig(step_count=5, strategy="none", solver="euler", target_cfg=1.0)
    noise, _, _ = invert_and_cache(net, z, cond, cfg)
    result = edit(net, noise, None, target, cfg)

    field = lambda zz, tt, cc: net.forward(zz, tt, target)
    plain = integrate(field, FlowState(noise, 0.0), TimeGrid.uniform(5, "forward"), "euler")
    assert np.max(np.abs(result.edited - plain[-1].z)) <= 1e-12
    assert not result.injected_steps.any()


def test_edit_injection_window_and_prefix_consistency():
    # Injected steps are exactly the first n denoising steps (the mirror of
    # the final n inversion steps), and a shared injected prefix produces
    # bitwise-identical velocities regardless of how long the window is.
    net = randomized_net()
    z, cond = sample_state(seed=4)
    target = Conditioning.for_labels(0, 3)
    base = EditConfig(step_count=6, strategy="V", injection_steps=6, injection_block_start=1, solver="euler")
    noise, cache, _ = invert_and_cache(net, z, cond, base, record_all=True)

    def run(n):
        cfg = EditConfig(step_count=6, strategy="V" if n else "none", injection_steps=n, injection_block_start=1, solver="euler")
        return edit(net, noise, cache if n else None, target, cfg, keep_step_velocities=True)

    r2, r5 = run(2), run(5)
    assert list(r2.injected_steps) == [True, True, False, False, False, False]
    assert list(r5.injected_steps) == [True] * 5 + [False]
    for j in range(2):
        assert np.array_equal(r2.step_velocities[j], r5.step_velocities[j])
    assert not np.array_equal(r2.step_velocities[2], r5.step_velocities[2])

    r0 = run(0)
    none_cfg = EditConfig(step_count=6, strategy="none", solver="euler")
    plain = edit(net, noise, None, target, none_cfg, keep_step_velocities=True)
    for j in range(6):
        assert np.array_equal(r0.step_velocities[j], plain.step_velocities[j])


def test_edit_deterministic():
    net = randomized_net()
    z, cond = sample_state(seed=5)
    target = Conditioning.for_labels(2, 2)
    cfg = EditConfig(step_count=4, strategy="KV", injection_steps=3, injection_block_start=1, solver="rf2")
    noise, cache, _ = invert_and_cache(net, z, cond, cfg)
    a = edit(net, noise, cache, target, cfg)
    b = edit(net, noise, cache, target, cfg)
    assert np.array_equal(a.edited, b.edited)
    assert np.array_equal(a.velocity_norms, b.velocity_norms)


def test_edit_strategies_differ():
    net = randomized_net()
    z, cond = sample_state(seed=6)
    target = Conditioning.for_labels(3, 1)
    outs = {}
    for strategy in ("V", "K", "KV", "none"):
        cfg = EditConfig(step_count=4, strategy=strategy, injection_steps=3 if strategy != "none" else 0, solver="euler")
        noise, cache, _ = invert_and_cache(net, z, cond, cfg)
        outs[strategy] = edit(net, noise, cache if strategy != "none" else None, target, cfg).edited
    assert not np.array_equal(outs["V"], outs["K"])
    assert not np.array_equal(outs["V"], outs["KV"])
    assert not np.array_equal(outs["KV"], outs["none"])


def test_edit_config_validation():
    with pytest.raises(ValueError):
        EditConfig(strategy="QK")
    with pytest.raises(ValueError):
        EditConfig(injection_steps=30, step_count=25)
    with pytest.raises(ValueError):
        EditConfig(injection_block_start=0)
    cfg = EditConfig(strategy="V", injection_steps=1, injection_block_start=9)
    with pytest.raises(ValueError):
        cfg.validate_for(randomized_net())


def test_edit_clip_and_sweep_schema():
    # Full-size pipeline smoke on an untrained (randomized) network: shapes,
    # value ranges, and the one-row-per-cell contract.
    net = randomized_net(NetConfig(), seed=1, scale=0.02)
    corpus = synth.make_corpus(1, seed=3)
    clip = corpus.clips[0]
    cfg = EditConfig(step_count=3, strategy="V", injection_steps=2, injection_block_start=2, solver="euler", target_cfg=2.0)
    result, edited_latent = edit_clip(
        net,
        clip.latent,
        Conditioning.for_labels(0, 0),
        Conditioning.for_labels(1, 0),
        cfg,
    )
    assert edited_latent.shape == clip.latent.shape
    assert result.edited.shape == latents.flow_tokens(clip.latent).shape

    from toneflow.metrics import class_prototypes

    protos = class_prototypes((c.spec.timbre, c.latent) for c in corpus.clips)
    rows = sweep(net, corpus.clips, protos, n_values=[0, 2], m_values=[1, 3], strategy="V", config=cfg)
    assert len(rows) == 4
    for row in rows:
        assert -1.0 <= row.fidelity <= 1.0
        assert -1.0 <= row.transferability <= 1.0
        assert row.clip_count == len(corpus.clips)
