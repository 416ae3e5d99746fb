import numpy as np
import pytest

from odelearn import dynamics as dyn
from odelearn.ekbf import NoiseModel


def test_euler_single_step_decay():
    model = dyn.StateSpaceModel(
        f=lambda x, u, w, t: [-x[0] + w[0]],
        g=lambda x, u, v, t: [x[0] + v[0]],
        n=1, p=0, q=1, noise=NoiseModel(Q=[[0.0]], R=[[0.0]]))
    traj = dyn.integrate(model, [1.0], None, 0.1, 0.1, method="euler")
    assert traj.states[1, 0] == pytest.approx(0.9, abs=1e-15)


def test_rk4_harmonic_oscillator_accuracy():
    # Eq.-form with b = (0, -1, 0, 0): xdot1 = x2, xdot2 = -x1 -> x1(t) = cos(t)
    model = dyn.duffing((0.0, -1.0, 0.0, 0.0), 1.0)
    traj = dyn.integrate(model, [1.0, 0.0], None, 10.0, 0.02, method="rk4")
    assert np.max(np.abs(traj.states[:, 0] - np.cos(traj.times))) < 1e-6


def test_rk4_fourth_order_convergence():
    model = dyn.StateSpaceModel(
        f=lambda x, u, w, t: [-x[0] + w[0]],
        g=lambda x, u, v, t: [x[0] + v[0]],
        n=1, p=0, q=1, noise=NoiseModel(Q=[[0.0]], R=[[0.0]]))

    def err(dt):
        traj = dyn.integrate(model, [1.0], None, 2.0, dt, method="rk4")
        return abs(traj.states[-1, 0] - np.exp(-2.0))

    e1, e2 = err(0.1), err(0.05)
    assert 12.0 < e1 / e2 < 20.0


def test_duffing_rhs_value():
    model = dyn.duffing((1.0, 1.0, 1.0, 1.0), 1.0)
    out = model.f([1.0, 1.0], [], [0.0, 0.0], 0.0)
    assert out[0] == 1.0
    assert out[1] == pytest.approx(2.0, abs=1e-15)


def test_duffing_linear_case_constant_jacobian():
    from odelearn.ekbf import linearize

    model = dyn.duffing((0.3, -0.9, 0.0, 0.4), 0.7, sigma_v=0.01)
    A1 = linearize(model, [0.1, 0.2], [], 0.0).A
    A2 = linearize(model, [2.5, -1.0], [], 3.0).A
    assert np.allclose(A1, A2)
    assert np.allclose(A1, [[0.0, 1.0], [-0.9, 0.3]])


def test_duffing_protocol_no_nan_over_48s():
    rng = np.random.default_rng(42)
    for i in range(100):
        model, x0 = dyn.duffing_protocol_draw(rng)
        traj = dyn.integrate(model, x0, None, 48.0, 0.02, method="euler",
                             noise_seed=i)
        assert np.all(np.isfinite(traj.states))
        assert np.all(np.isfinite(traj.outputs))


def test_tank_equilibrium():
    k = (0.5, 0.4, 0.3, 0.2)
    model = dyn.cascaded_tank(k)
    u = 2.0
    traj = dyn.integrate(model, [0.5, 0.5], dyn.constant_input(u), 4000.0, 1.0,
                         method="rk4")
    x1_star = (k[3] * u / k[0]) ** 2
    assert abs(traj.states[-1, 0] - x1_star) < 1e-3


def test_tank_dry_stays_dry():
    model = dyn.cascaded_tank((0.5, 0.4, 0.3, 0.2))
    out = model.f([0.0, 0.0], [0.0], [0.0, 0.0], 0.0)
    # smoothed sqrt at 0 contributes ~1e-3*k; levels clip at 0 during integration
    assert abs(out[0]) < 2e-3 and abs(out[1]) < 2e-3
    traj = dyn.integrate(model, [0.0, 0.0], dyn.constant_input(0.0), 50.0, 0.5)
    assert np.all(traj.states >= 0.0)
    assert np.max(traj.states) < 1e-2


def test_cartpole_equilibria():
    model = dyn.cartpole()
    up = model.f([0.0, 0.0, 0.0, 0.0], [0.0], [0.0] * 4, 0.0)
    assert np.allclose(up, 0.0)
    # sin(-pi) is ~1e-16 in floats; equilibrium holds to machine precision
    hanging = model.f([0.0, 0.0, -np.pi, 0.0], [0.0], [0.0] * 4, 0.0)
    assert np.allclose(hanging, 0.0, atol=1e-14)


def test_cartpole_energy_conservation():
    model = dyn.cartpole()
    x0 = [0.0, 0.0, -np.pi + 0.8, 0.0]
    traj = dyn.integrate(model, x0, dyn.constant_input(0.0), 10.0, 1e-3,
                         method="rk4")
    e = np.array([dyn.cartpole_energy(model, x) for x in traj.states])
    scale = max(abs(e[0]), np.max(np.abs(e)) - np.min(np.abs(e)), 1e-3)
    drift = np.max(np.abs(e - e[0])) / max(abs(e[0]), 1.0)
    assert drift < 1e-4


def test_cartpole_force_clamp():
    model = dyn.cartpole(u_max=25.0)
    a = model.f([0.0, 0.0, 0.5, 0.0], [100.0], [0.0] * 4, 0.0)
    b = model.f([0.0, 0.0, 0.5, 0.0], [25.0], [0.0] * 4, 0.0)
    assert np.allclose(a, b)


def test_blowup_error_reports_time():
    model = dyn.duffing((0.5, 0.5, 0.5, 0.5), 0.5)
    with pytest.raises(dyn.BlowUpError) as exc:
        dyn.integrate(model, [0.5, 0.5], None, 48.0, 0.02, method="euler")
    assert 0.0 < exc.value.t < 48.0


def test_synthesize_reproducible():
    model, x0 = dyn.duffing_protocol_draw(np.random.default_rng(5))
    ds1 = dyn.synthesize(model, None, 4.0, 0.02, seed=7)
    ds2 = dyn.synthesize(model, None, 4.0, 0.02, seed=7)
    assert dyn.dataset_to_csv(ds1) == dyn.dataset_to_csv(ds2)
    ds3 = dyn.synthesize(model, None, 4.0, 0.02, seed=8)
    assert dyn.dataset_to_csv(ds1) != dyn.dataset_to_csv(ds3)


def test_synthesize_zero_noise_equals_clean():
    model = dyn.cascaded_tank((0.5, 0.4, 0.3, 0.2), sigma_v=0.0)
    ds = dyn.synthesize(model, dyn.constant_input(1.0), 40.0, 4.0, seed=3,
                        x0=[1.0, 1.0])
    traj = dyn.integrate(model, [1.0, 1.0], dyn.constant_input(1.0), 40.0, 4.0,
                         method="euler")
    assert np.allclose(ds.measurements[:, 0], traj.states[:, 1])


def test_random_hold_respects_bound():
    sig = dyn.random_hold_input(bound=25.0, hold_dt=0.1, seed=11)
    ts = np.arange(0, 2.0, 0.004)
    us = sig.sample(ts)
    assert np.all(np.abs(us) < 25.0)
    # held constant within intervals
    assert us[0] == us[10]


def test_rmse_values():
    assert dyn.rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert dyn.rmse([1.0, 2.0, 3.0], [0.0, 1.0, 2.0]) == pytest.approx(1.0)
    pred = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert dyn.rmse(pred, np.zeros((2, 2))) == pytest.approx(np.sqrt(12.5))
    with pytest.raises(ValueError):
        dyn.rmse([1.0], [1.0, 2.0])


def test_simulate_identified_roundtrip():
    model, x0 = dyn.duffing_protocol_draw(np.random.default_rng(9), sigma_v=0.0)
    ds = dyn.synthesize(model, None, 8.0, 0.02, seed=1, x0=x0)
    sim = dyn.simulate_identified(model, ds, method="euler")
    assert dyn.rmse(sim.outputs, ds.measurements) < 1e-12


def test_dataset_csv_roundtrip(tmp_path):
    model, x0 = dyn.duffing_protocol_draw(np.random.default_rng(6))
    ds = dyn.synthesize(model, None, 2.0, 0.02, seed=4, x0=x0)
    path = tmp_path / "data.csv"
    dyn.save_dataset(ds, path)
    back = dyn.load_dataset(path)
    assert np.array_equal(back.times, ds.times)
    assert np.array_equal(back.measurements[:, 0], ds.measurements[:, 0])
    meta_path = tmp_path / "data.meta"
    dyn.save_metadata(ds, meta_path)
    meta, x0_back = dyn.load_metadata(meta_path)
    assert meta["system"] == "duffing"
    assert np.allclose(x0_back, ds.x0)


def test_csv_header_format(tmp_path):
    model = dyn.cascaded_tank((0.5, 0.4, 0.3, 0.2))
    ds = dyn.synthesize(model, dyn.constant_input(1.0), 20.0, 4.0, seed=0)
    text = dyn.dataset_to_csv(ds)
    assert text.splitlines()[0] == "t,u_1,y_1"


def test_tank_benchmark_csv_parser(tmp_path):
    path = tmp_path / "dataBenchmark.csv"
    rows = ["uEst,uVal,yEst,yVal,Ts"]
    for i in range(5):
        rows.append(f"{1.0 + i},{2.0 + i},{3.0 + i},{4.0 + i},4")
    path.write_text("\n".join(rows) + "\n")
    train, test = dyn.load_cascaded_tank_benchmark(path)
    assert train.meta["dt"] == 4.0
    assert np.allclose(train.inputs[:, 0], [1, 2, 3, 4, 5])
    assert np.allclose(test.measurements[:, 0], [4, 5, 6, 7, 8])
    assert train.times[-1] == 16.0


def test_kernel_and_python_paths_agree():
    model, x0 = dyn.duffing_protocol_draw(np.random.default_rng(12))
    fallback = dyn.StateSpaceModel(f=model.f, g=model.g, n=2, p=0, q=1,
                                   noise=model.noise)
    for method in ("euler", "rk4"):
        t1 = dyn.integrate(model, x0, None, 5.0, 0.02, method=method, noise_seed=2)
        t2 = dyn.integrate(fallback, x0, None, 5.0, 0.02, method=method, noise_seed=2)
        assert np.allclose(t1.states, t2.states, atol=1e-12)

    tank = dyn.cascaded_tank((0.5, 0.4, 0.3, 0.2), sigma_v=0.01, q_process=1e-4)
    tank_py = dyn.StateSpaceModel(f=tank.f, g=tank.g, n=2, p=1, q=1,
                                  noise=tank.noise, state_clip=tank.state_clip)
    sig = dyn.multisine_input([1.0, 0.5], [0.003, 0.011], offset=2.0)
    t1 = dyn.integrate(tank, [1.0, 1.0], sig, 400.0, 4.0, noise_seed=5)
    t2 = dyn.integrate(tank_py, [1.0, 1.0], sig, 400.0, 4.0, noise_seed=5)
    assert np.allclose(t1.states, t2.states, atol=1e-12)
