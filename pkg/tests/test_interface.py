import math

import numpy as np
import pytest

from freqnet.interface import (
    WaveChannelConfig,
    channel_peek,
    channel_step,
    channel_storage,
    couple_optimizer_port,
    couple_plant_port,
    decode_optimizer_measurement,
    decode_plant_input,
    delay_steps,
    encode_optimizer_wave,
    encode_plant_wave,
    init_channel,
)

S2 = math.sqrt(2.0)


def test_encode_examples():
    sp, sm = encode_plant_wave([2.0], [1.0], 1.0)
    np.testing.assert_allclose([sp[0], sm[0]], [1 / S2, 3 / S2])
    so_p, so_m = encode_optimizer_wave([2.0], [1.0], 1.0)
    np.testing.assert_allclose([so_p[0], so_m[0]], [3 / S2, 1 / S2])
    # 1/2 (|s+|^2 - |s-|^2) = -(gw)^T p on the plant side
    assert 0.5 * (sp[0] ** 2 - sm[0] ** 2) == pytest.approx(-2.0)


def test_decode_examples():
    np.testing.assert_allclose(decode_plant_input([3 / S2], [1.0], 1.0), [2.0])
    np.testing.assert_allclose(decode_plant_input([0.4], [0.0], 2.0), [2.0 * 0.4])
    np.testing.assert_allclose(decode_optimizer_measurement([2.0], [1 / S2], 1.0), [1.0])


@pytest.mark.parametrize("eta", [0.3, 1.0, 4.0])
def test_roundtrips_and_power(eta):
    rng = np.random.default_rng(0)
    p, gw, u, y = rng.normal(size=(4, 200, 4))
    sp, sm = encode_plant_wave(p, gw, eta)
    np.testing.assert_allclose(decode_plant_input(sm, gw, eta), p, atol=1e-12)
    so_p, so_m = encode_optimizer_wave(u, y, eta)
    np.testing.assert_allclose(decode_optimizer_measurement(u, so_m, eta), y, atol=1e-12)
    np.testing.assert_allclose(0.5 * (sp ** 2 - sm ** 2).sum(-1), -(gw * p).sum(-1), atol=1e-12)
    np.testing.assert_allclose(0.5 * (so_p ** 2 - so_m ** 2).sum(-1), (u * y).sum(-1), atol=1e-12)


def test_eta_must_be_positive():
    with pytest.raises(ValueError):
        encode_plant_wave([1.0], [1.0], 0.0)
    with pytest.raises(ValueError):
        WaveChannelConfig(eta=-1.0)


def test_coupled_ports_solve_their_implicit_relations():
    rng = np.random.default_rng(1)
    eta = 0.7
    sm, gw_free, gain = rng.normal(size=4), rng.normal(size=4), rng.uniform(0, 0.1, 4)
    p = couple_plant_port(sm, gw_free, gain, eta)
    np.testing.assert_allclose(p, decode_plant_input(sm, gw_free + gain * p, eta), atol=1e-14)
    u_free, b = rng.normal(size=4), rng.uniform(0, 1, 4)
    lo, hi = -0.5 * np.ones(4), 0.5 * np.ones(4)
    y, u = couple_optimizer_port(u_free, b, lo, hi, sm, eta)
    np.testing.assert_allclose(u, np.clip(u_free - b * y, lo, hi), atol=1e-14)
    np.testing.assert_allclose(y, decode_optimizer_measurement(u, sm, eta), atol=1e-14)


def test_zero_delay_passes_through():
    cfg = WaveChannelConfig(delay_down=0.0, delay_up=0.0, step=1e-3)
    st = init_channel(cfg, np.zeros(2))
    down, up = channel_step(st, cfg, [1.0, 2.0], [3.0, 4.0])
    np.testing.assert_array_equal(down, [1.0, 2.0])
    np.testing.assert_array_equal(up, [3.0, 4.0])
    with pytest.raises(ValueError):
        channel_peek(st, cfg)


def test_impulse_arrives_after_delay():
    h = 6e-4
    cfg = WaveChannelConfig(delay_down=18 * h, delay_up=5 * h, step=h)
    assert (cfg.steps_down, cfg.steps_up) == (18, 5)
    st = init_channel(cfg, np.zeros(1))
    arrivals_down, arrivals_up = [], []
    for k in range(40):
        pulse = [1.0] if k == 3 else [0.0]
        down, up = channel_step(st, cfg, pulse, pulse)
        arrivals_down.append(down[0])
        arrivals_up.append(up[0])
    assert np.nonzero(arrivals_down)[0].tolist() == [3 + 18]
    assert np.nonzero(arrivals_up)[0].tolist() == [3 + 5]


def test_peek_matches_next_output():
    cfg = WaveChannelConfig(delay_down=3e-3, delay_up=2e-3, filter_enabled=True, step=1e-3)
    st = init_channel(cfg, np.zeros(2))
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.normal(size=(2, 2))
        peek = channel_peek(st, cfg)
        out = channel_step(st, cfg, a, b)
        np.testing.assert_array_equal(peek[0], out[0])
        np.testing.assert_array_equal(peek[1], out[1])


def test_filter_has_unit_dc_gain():
    cfg = WaveChannelConfig(delay_down=2e-3, delay_up=2e-3, filter_enabled=True, step=1e-4)
    st = init_channel(cfg, np.zeros(3))
    c = np.array([0.3, -1.2, 2.0])
    # e^-25 ~ 1e-11: ten time constants only reach ~5e-5
    steps = int(25 * cfg.zeta_omega / cfg.step) + 40
    for _ in range(steps):
        down, up = channel_step(st, cfg, c, c)
    np.testing.assert_allclose(down, c, atol=1e-9)
    np.testing.assert_allclose(up, c, atol=1e-9)


def test_storage_examples():
    h = 1e-3
    cfg = WaveChannelConfig(delay_down=3 * h, delay_up=2 * h, step=h)
    w = np.array([0.5, 0.1])
    st = init_channel(cfg, w)
    assert channel_storage(st, cfg, w) == 0.0
    dev = np.array([0.3, -0.4])
    st.buf_down[1] = w + dev
    assert channel_storage(st, cfg, w) == pytest.approx(0.5 * h * dev @ dev)


@pytest.mark.parametrize("filtered", [False, True])
def test_synthetic_energy_bookkeeping(filtered):
    """Per step: S+ - S = h/2 (|in|^2 - |out|^2) minus the filter loss."""
    h = 1e-3
    cfg = WaveChannelConfig(delay_down=7 * h, delay_up=4 * h, filter_enabled=filtered,
                            zeta_u=0.01, zeta_omega=0.02, step=h)
    rng = np.random.default_rng(3)
    st = init_channel(cfg, np.zeros(3))
    worst, min_loss = 0.0, np.inf
    for _ in range(300):
        a, b = rng.normal(size=(2, 3))
        before = channel_storage(st, cfg, 0.0)
        prev_down, prev_up = st.filt_down.copy(), st.filt_up.copy()
        down, up = channel_step(st, cfg, a, b)
        after = channel_storage(st, cfg, 0.0)
        supply = 0.5 * h * (a @ a + b @ b - st.arrived_down @ st.arrived_down
                            - st.arrived_up @ st.arrived_up)
        if filtered:
            # filter energy: zeta/2 |s|^2 changes by the exact ZOH update;
            # compare against the continuous-time balance instead
            loss = 0.5 * h * (np.sum((st.arrived_down - down) ** 2) + np.sum((st.arrived_up - up) ** 2))
            min_loss = min(min_loss, loss)
            filt = 0.5 * cfg.zeta_u * (down @ down - prev_down @ prev_down) \
                + 0.5 * cfg.zeta_omega * (up @ up - prev_up @ prev_up)
            line = after - before - filt
            worst = max(worst, abs(line - supply))
        else:
            worst = max(worst, abs(after - before - supply))
    assert worst < 1e-12
    if filtered:
        assert min_loss >= 0.0


def test_delay_rounding():
    assert delay_steps(0.011, 6e-4) == 18
    assert delay_steps(0.040, 6e-4) == 67
    with pytest.raises(ValueError):
        delay_steps(-1.0, 1e-3)
