"""Command-line entry point: synth | train | eval | rl.

Every run is driven by one INI-style config file; unknown keys are
rejected, and the fully resolved configuration (defaults included) is
written back next to the artifacts as `manifest.cfg`.  All randomness
derives from the single [run] seed through seed-sequence splitting, so
identical config plus seed reproduces identical primary artifacts;
wall-clock time lives only in the manifest's [meta] timestamp field.
"""

from __future__ import annotations

import argparse
import configparser
import datetime
import hashlib
import os
import sys

import numpy as np

from . import control, dynamics, learner
from .eqlnet import PriorKnowledge, PriorTerm, make_ode_network, precondition

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_NO_SWINGUP = 4


class ConfigError(ValueError):
    pass


SCHEMA = {
    "run": {"seed": "7", "output_dir": "run_out"},
    "system": {
        "name": "duffing",
        "draw": "none",               # none | protocol
        "min_magnitude": "0.0",
        "b": "-0.5,-0.4,-0.3,0.6",
        "omega0": "0.8",
        "k": "0.5,0.4,0.3,0.2",
        "pump_gain": "1.0",
        "sensor_gain": "1.0",
        "sigma_v": "0.01",
        "q_process": "0.0",
        "m_c": "1.0", "m_p": "0.1", "length": "0.5", "gravity": "9.81",
        "u_max": "25.0",
    },
    "dataset": {
        "t_end": "48.0",
        "dt": "0.02",
        "method": "euler",
        "x0": "0.5,0.5",
        "x0_random": "false",
        "include_x0": "true",
        "input": "none",              # none | constant:V | multisine:o,a1@f1,a2@f2 | random_hold:B,H
        "subsample": "1",
        "train_window": "0.0",        # 0 = everything
    },
    "network": {
        "state_kind": "odenet",       # odenet | parametric_duffing | parametric_tank
        "neurons": "6",
        "branches": "2",
        "operators": "identity,cube,cos",
        "use_time": "true",
        "delta": "1e-3",
        "precondition": "none",       # none | tank
        "freeze_structure": "false",
        "b_init": "-0.5,-0.5,-0.5,0.5",
        "omega0_init": "fft",
        "k_init": "0.3,0.3,0.3,0.3",
        "mean_hidden": "32,32",
        "mean_features": "3",
        "mean_harmonic": "true",
        "cov_hidden": "24",
        "output": "first_state",      # first_state | identity | affine_trainable
    },
    "learner": {
        "alpha": "1,1,1,0.1",
        "alpha41": "1.0",
        "alpha42": "1.0",
        "reg_a": "1,10,5,0.01",
        "delta": "1e-3",
        "lr": "2e-3",
        "pretrain_lr": "5e-3",
        "pretrain_epochs": "1500",
        "epochs": "1500",
        "epochs_sparsify": "0",
        "batch_size": "0",
        "meas_var": "auto",
        "q_process": "1e-6",
        "p0": "1e-4",
    },
    "control": {
        "episode_length": "2.0",
        "sample_dt": "0.004",
        "max_episodes": "6",
        "horizon": "1.0",
        "control_dt": "0.02",
        "u_max": "25.0",
        "oracle": "false",
        "mpc_iters": "40",
        "mpc_restarts": "2",
        "reward_window": "125",
        "rl_epochs": "300",
        "rl_pretrain_epochs": "400",
        "rl_neurons": "6",
    },
    "eval": {
        "split": "all",               # all | last8s | lastNs
        "method": "euler",
        "substeps": "1",
    },
}


def load_config(path):
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    resolved = {sec: dict(defaults) for sec, defaults in SCHEMA.items()}
    for sec in cp.sections():
        if sec == "meta":
            continue  # manifests carry an informational [meta] section
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, val in cp[sec].items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            resolved[sec][key] = val
    return resolved


def write_manifest(resolved, path, extra_meta=None):
    cp = configparser.ConfigParser()
    for sec in sorted(resolved):
        cp[sec] = {k: str(v) for k, v in sorted(resolved[sec].items())}
    meta = {"timestamp": datetime.datetime.now().isoformat()}
    meta.update(extra_meta or {})
    cp["meta"] = meta
    with open(path, "w") as fh:
        cp.write(fh)


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip() != ""]


def _bool(text):
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def _seeds(resolved, n):
    base = int(resolved["run"]["seed"])
    ss = np.random.SeedSequence(base).spawn(n)
    return [int(s.generate_state(1)[0] % (2 ** 31)) for s in ss]


def build_system(resolved, rng=None):
    sec = resolved["system"]
    name = sec["name"]
    sigma_v = float(sec["sigma_v"])
    if name == "duffing":
        if sec["draw"] == "protocol":
            if rng is None:
                raise ConfigError("protocol draw needs a seeded generator")
            model, x0 = dynamics.duffing_protocol_draw(
                rng, sigma_v=sigma_v, min_magnitude=float(sec["min_magnitude"]))
            return model, x0
        b = _floats(sec["b"])
        if len(b) != 4:
            raise ConfigError("system.b must have four entries")
        return dynamics.duffing(b, float(sec["omega0"]), sigma_v=sigma_v), None
    if name == "cascaded_tank":
        k = _floats(sec["k"])
        if len(k) != 4:
            raise ConfigError("system.k must have four entries")
        model = dynamics.cascaded_tank(k, sigma_v=sigma_v,
                                       q_process=float(sec["q_process"]))
        pump = float(sec["pump_gain"])
        sens = float(sec["sensor_gain"])
        if pump != 1.0 or sens != 1.0:
            base_f, base_g = model.f, model.g
            model = dynamics.StateSpaceModel(
                f=lambda x, u, w, t: base_f(x, [pump * u[0]], w, t),
                g=lambda x, u, v, t: [sens * x[1] + v[0]],
                n=2, p=1, q=1, noise=model.noise, name="cascaded_tank_perturbed",
                params=dict(model.params, pump_gain=pump, sensor_gain=sens),
                state_clip=model.state_clip)
        return model, None
    if name == "cartpole":
        model = dynamics.cartpole(m_c=float(sec["m_c"]), m_p=float(sec["m_p"]),
                                  length=float(sec["length"]),
                                  gravity=float(sec["gravity"]),
                                  u_max=float(sec["u_max"]), sigma_v=sigma_v)
        return model, None
    raise ConfigError(f"unknown system {name!r}")


def build_input(spec):
    spec = str(spec).strip()
    if spec in ("none", ""):
        return None
    kind, _, rest = spec.partition(":")
    if kind == "constant":
        return dynamics.constant_input(float(rest))
    if kind == "multisine":
        parts = rest.split(",")
        offset = float(parts[0])
        amps, freqs = [], []
        for p in parts[1:]:
            a, _, f = p.partition("@")
            amps.append(float(a))
            freqs.append(float(f))
        return dynamics.multisine_input(amps, freqs, offset=offset)
    if kind == "random_hold":
        bound, hold, seed = (rest.split(",") + ["0"])[:3]
        return dynamics.random_hold_input(float(bound), float(hold), int(seed))
    raise ConfigError(f"unknown input spec {spec!r}")


def cmd_synth(config_path, out_dir=None):
    resolved = load_config(config_path)
    out = out_dir or resolved["run"]["output_dir"]
    os.makedirs(out, exist_ok=True)
    seeds = _seeds(resolved, 3)
    rng = np.random.default_rng(np.random.SeedSequence(seeds[0]))
    model, x0_drawn = build_system(resolved, rng=rng)
    sec = resolved["dataset"]
    if x0_drawn is not None:
        x0 = x0_drawn
    elif _bool(sec["x0_random"]):
        x0 = rng.uniform(0.0, 1.0, size=model.n)
    else:
        x0 = np.array(_floats(sec["x0"]))
        if len(x0) != model.n:
            raise ConfigError(f"dataset.x0 must have {model.n} entries")
    signal = build_input(sec["input"])
    ds = dynamics.synthesize(model, signal, float(sec["t_end"]), float(sec["dt"]),
                             seed=seeds[1], method=sec["method"],
                             include_x0=_bool(sec["include_x0"]), x0=x0)
    sub = int(sec["subsample"])
    if sub > 1:
        ds = dynamics.Dataset(times=ds.times[::sub], inputs=ds.inputs[::sub],
                              measurements=ds.measurements[::sub], x0=ds.x0,
                              meta=dict(ds.meta, dt=float(sec["dt"]) * sub,
                                        subsample=sub))
    csv_path = os.path.join(out, "data.csv")
    dynamics.save_dataset(ds, csv_path)
    dynamics.save_metadata(ds, os.path.join(out, "data.meta"))
    digest = hashlib.sha256(open(csv_path, "rb").read()).hexdigest()
    write_manifest(resolved, os.path.join(out, "manifest.cfg"),
                   {"dataset_sha256": digest, "command": "synth"})
    print(f"wrote {csv_path} ({len(ds.times)} samples, sha256={digest[:12]})")
    return EXIT_OK


def _build_networks(resolved, ds, seeds):
    sec = resolved["network"]
    rng = np.random.default_rng(np.random.SeedSequence(seeds[2]))
    n_state = 2
    dt = float(ds.times[1] - ds.times[0])
    t0, t_scale = float(ds.times[0]), float(ds.times[-1] - ds.times[0])

    kind = sec["state_kind"]
    p_in = ds.inputs.shape[1]
    if kind == "parametric_duffing":
        w0 = sec["omega0_init"]
        if w0 == "fft":
            w0 = learner.estimate_forcing_frequency(ds.measurements[:, 0], dt)
        b_init = _floats(sec["b_init"])
        state_net = learner.ParametricModel(
            "duffing", {"b1": b_init[0], "b2": b_init[1], "b3": b_init[2],
                        "b4": b_init[3], "omega0": float(w0)},
            frozen=set() if not _bool(sec["freeze_structure"]) else set())
    elif kind == "parametric_tank":
        k_init = _floats(sec["k_init"])
        state_net = learner.ParametricModel(
            "cascaded_tank", {f"k{i+1}": k_init[i] for i in range(4)})
    elif kind == "odenet":
        ops = tuple(s.strip() for s in sec["operators"].split(","))
        state_net = make_ode_network(
            n_state=n_state, n_in=p_in, neurons=int(sec["neurons"]),
            branches=int(sec["branches"]), ops=ops, delta=float(sec["delta"]),
            use_time=_bool(sec["use_time"]), rng=rng)
        if sec["precondition"] == "tank":
            k_init = _floats(sec["k_init"])
            prior = PriorKnowledge(terms=(
                PriorTerm(0, "sqrt_smooth", {"x1": 1.0}, -k_init[0]),
                PriorTerm(0, "identity", {"u1": 1.0}, k_init[3]),
                PriorTerm(1, "sqrt_smooth", {"x1": 1.0}, k_init[1]),
                PriorTerm(1, "sqrt_smooth", {"x2": 1.0}, -k_init[2]),
            ))
            state_net = precondition(state_net, prior)
        elif sec["precondition"] != "none":
            raise ConfigError(f"unknown precondition {sec['precondition']!r}")
    else:
        raise ConfigError(f"unknown state_kind {kind!r}")

    n_feat = int(sec["mean_features"])
    hidden = tuple(int(v) for v in _floats(sec["mean_hidden"]))
    if n_feat > 0:
        omegas = learner.estimate_dominant_frequencies(
            ds.measurements[:, 0], dt, count=n_feat)
        if _bool(sec["mean_harmonic"]) and omegas:
            w0 = learner.estimate_forcing_frequency(ds.measurements[:, 0], dt)
            omegas = list(omegas) + [3.0 * w0]
        mean_net = learner.make_time_feature_net(n_state, omegas, t0, t_scale,
                                                 hidden=hidden, rng=rng)
    else:
        mean_net = learner.make_mlp((1,) + hidden + (n_state,), rng)
    n_tri = n_state * (n_state + 1) // 2
    cov_hidden = tuple(int(v) for v in _floats(sec["cov_hidden"]))
    cov_net = learner.make_mlp((1,) + cov_hidden + (n_tri,), rng, out_scale=0.01)

    output = sec["output"]
    if output == "first_state":
        out_net = learner.AffineOutput(C=[[1.0] + [0.0] * (n_state - 1)], c0=[0.0])
    elif output == "identity":
        out_net = learner.AffineOutput(C=np.eye(n_state), c0=np.zeros(n_state))
    elif output == "affine_trainable":
        out_net = learner.AffineOutput(C=[[0.0] * (n_state - 1) + [1.0]], c0=[0.0],
                                       trainable=True)
    else:
        raise ConfigError(f"unknown output net {output!r}")
    return learner.LearnerNetworks(mean_net=mean_net, cov_net=cov_net,
                                   state_net=state_net, output_net=out_net)


def _learner_config(resolved, ds, seeds):
    sec = resolved["learner"]
    alpha = _floats(sec["alpha"])
    reg_a = _floats(sec["reg_a"])
    weights = learner.LossWeights(alpha1=alpha[0], alpha2=alpha[1],
                                  alpha3=alpha[2], alpha4=alpha[3],
                                  alpha41=float(sec["alpha41"]),
                                  alpha42=float(sec["alpha42"]),
                                  a=tuple(reg_a), delta=float(sec["delta"]))
    meas_var = sec["meas_var"]
    if meas_var == "auto":
        sigma = float(ds.meta.get("sigma_v", 0.0) or 0.0)
        meas_var = max(sigma ** 2, 1e-8)
    batch = int(sec["batch_size"]) or None
    return learner.LearnerConfig(
        weights=weights, lr=float(sec["lr"]),
        pretrain_lr=float(sec["pretrain_lr"]),
        pretrain_epochs=int(sec["pretrain_epochs"]),
        epochs=int(sec["epochs"]), epochs_sparsify=int(sec["epochs_sparsify"]),
        batch_size=batch, seed=seeds[3], meas_var=float(meas_var),
        q_process=float(sec["q_process"]), p0=float(sec["p0"]))


def cmd_train(config_path, dataset_path, meta_path=None, out_dir=None):
    resolved = load_config(config_path)
    out = out_dir or resolved["run"]["output_dir"]
    os.makedirs(out, exist_ok=True)
    meta, x0 = (dynamics.load_metadata(meta_path) if meta_path else ({}, None))
    ds = dynamics.load_dataset(dataset_path, x0=x0, meta=meta)
    if ds.measurements.ndim != 2 or ds.measurements.shape[1] < 1:
        raise ConfigError("dataset has no measurement columns")
    window = float(resolved["dataset"]["train_window"])
    if window > 0:
        keep = ds.times <= ds.times[0] + window + 1e-12
        ds = dynamics.Dataset(times=ds.times[keep], inputs=ds.inputs[keep],
                              measurements=ds.measurements[keep], x0=ds.x0,
                              meta=ds.meta)
    sub = int(resolved["dataset"]["subsample"])
    if sub > 1:
        ds = dynamics.Dataset(times=ds.times[::sub], inputs=ds.inputs[::sub],
                              measurements=ds.measurements[::sub], x0=ds.x0,
                              meta=ds.meta)
    seeds = _seeds(resolved, 5)
    networks = _build_networks(resolved, ds, seeds)
    cfg = _learner_config(resolved, ds, seeds)
    report = learner.train(ds, networks, cfg)

    report_path = os.path.join(out, "report.csv")
    with open(report_path, "w") as fh:
        fh.write("epoch,L1,L2,L3,L4\n")
        for e in report.epochs:
            fh.write(f"{e['epoch']},{e['l1']!r},{e['l2']!r},{e['l3']!r},{e['l4']!r}\n")
    ckpt_path = os.path.join(out, "checkpoint.json")
    x0_save = ds.x0 if ds.x0 is not None else report.trained_x0
    learner.save_checkpoint(ckpt_path, networks, dataset=ds, config=cfg,
                            x0=x0_save)
    digest = learner.dataset_hash(ds)
    write_manifest(resolved, os.path.join(out, "manifest.cfg"),
                   {"dataset_sha256": digest, "command": "train",
                    "diverged": str(report.diverged)})
    final = report.final()
    if final:
        print("final losses: " + " ".join(
            f"{k.upper()}={final[k]:.6g}" for k in ("l1", "l2", "l3", "l4")))
    print(f"wrote {ckpt_path}")
    if report.diverged:
        print(f"training diverged: {report.abort_reason}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(checkpoint_path, dataset_path, split="all", meta_path=None,
             out_dir=None, method="euler", substeps=1, plot=False):
    networks, extras = learner.load_checkpoint(checkpoint_path)
    meta, x0 = (dynamics.load_metadata(meta_path) if meta_path else ({}, None))
    ds = dynamics.load_dataset(dataset_path, x0=x0, meta=meta)
    if ds.x0 is None:
        if extras.get("x0") is None:
            print("dataset provides no initial state and the checkpoint has "
                  "no trained one", file=sys.stderr)
            return EXIT_CONFIG
        ds = dynamics.Dataset(times=ds.times, inputs=ds.inputs,
                              measurements=ds.measurements,
                              x0=np.asarray(extras["x0"]), meta=ds.meta)
    model = learner.identified_model(networks, q=ds.measurements.shape[1])
    sim = dynamics.simulate_identified(model, ds, method=method,
                                       substeps=substeps)
    times = ds.times
    if split == "all":
        mask = np.ones(len(times), dtype=bool)
    elif split.startswith("last") and split.endswith("s"):
        horizon = float(split[4:-1])
        mask = times >= times[-1] - horizon + 1e-12
    else:
        print(f"unknown split {split!r}", file=sys.stderr)
        return EXIT_CONFIG
    err = dynamics.rmse(sim.outputs[mask], ds.measurements[mask])
    print(f"rmse={err!r}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "eval.csv")
        with open(path, "w") as fh:
            q = ds.measurements.shape[1]
            cols = ["t"] + [f"y_true_{j+1}" for j in range(q)] \
                + [f"y_sim_{j+1}" for j in range(q)]
            fh.write(",".join(cols) + "\n")
            for i in np.nonzero(mask)[0]:
                row = [repr(float(times[i]))]
                row += [repr(float(v)) for v in ds.measurements[i]]
                row += [repr(float(v)) for v in sim.outputs[i]]
                fh.write(",".join(row) + "\n")
        if plot:
            emit_gnuplot(out_dir, times[mask], ds.measurements[mask],
                         sim.outputs[mask])
    return EXIT_OK


def emit_gnuplot(out_dir, times, y_true, y_sim):
    """Write gnuplot-compatible data and a plot script (no rendering)."""
    dat = os.path.join(out_dir, "eval.dat")
    with open(dat, "w") as fh:
        fh.write("# t y_true y_sim\n")
        for i, t in enumerate(times):
            cols = [t] + list(np.atleast_1d(y_true[i])) + list(np.atleast_1d(y_sim[i]))
            fh.write(" ".join(repr(float(v)) for v in cols) + "\n")
    gp = os.path.join(out_dir, "eval.gp")
    with open(gp, "w") as fh:
        fh.write('set xlabel "t"\nset ylabel "y"\n'
                 f'plot "eval.dat" using 1:2 with lines title "measured", \\\n'
                 f'     "eval.dat" using 1:3 with lines title "simulated"\n')
    return dat, gp


def _rl_train_fn(resolved, seeds):
    """Episode-data model fit for the loop: state net trained on all episodes."""
    sec = resolved["control"]

    def fit(datasets, seed):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        n = 4
        merged = datasets[-1]
        state_net = make_ode_network(
            n_state=n, n_in=1, neurons=int(sec["rl_neurons"]), branches=2,
            ops=("identity", "sin", "cos", "square"), rng=rng)
        nets_list = []
        for k, ds in enumerate(datasets):
            t0, t_scale = float(ds.times[0]), float(ds.times[-1] - ds.times[0])
            mean = learner.make_mlp((1, 32, 32, n), rng)
            cov = learner.make_mlp((1, 16, n * (n + 1) // 2), rng, out_scale=0.01)
            nets_list.append(learner.LearnerNetworks(
                mean_net=mean, cov_net=cov, state_net=state_net,
                output_net=learner.AffineOutput(C=np.eye(n), c0=np.zeros(n))))
        cfg = learner.LearnerConfig(
            pretrain_epochs=int(sec["rl_pretrain_epochs"]),
            epochs=int(sec["rl_epochs"]), lr=2e-3, pretrain_lr=5e-3,
            meas_var=1e-6, q_process=1e-6, p0=1e-6, seed=seed)
        learner.train_episodes(datasets, nets_list, cfg)
        return nets_list[-1]

    return fit


def cmd_rl(config_path, out_dir=None):
    resolved = load_config(config_path)
    out = out_dir or resolved["run"]["output_dir"]
    os.makedirs(out, exist_ok=True)
    seeds = _seeds(resolved, 6)
    model, _ = build_system(resolved)
    sec = resolved["control"]
    mpc = control.MpcConfig(horizon=float(sec["horizon"]),
                            control_dt=float(sec["control_dt"]),
                            sim_dt=float(sec["sample_dt"]),
                            u_max=float(sec["u_max"]),
                            max_iters=int(sec["mpc_iters"]),
                            restarts=int(sec["mpc_restarts"]))
    loop_cfg = control.RlLoopConfig(
        episode_length=float(sec["episode_length"]),
        sample_dt=float(sec["sample_dt"]),
        max_episodes=int(sec["max_episodes"]),
        reward_window=int(sec["reward_window"]),
        u_max=float(sec["u_max"]), mpc=mpc)
    oracle = _bool(sec["oracle"])
    fit = None if oracle else _rl_train_fn(resolved, seeds)
    log = control.run_rl_loop(model, fit, loop_cfg, seed=seeds[4],
                              oracle_mode=oracle)
    lines = ["episode,kind,reward,switched_at,model_rmse,csv"]
    for rec in log.episodes:
        csv_path = os.path.join(out, f"episode_{rec.index}.csv")
        control.write_episode_csv(csv_path, rec)
        lines.append(f"{rec.index},{rec.kind},{rec.reward!r},"
                     f"{'' if rec.switched_at is None else repr(rec.switched_at)},"
                     f"{'' if rec.model_rmse is None else repr(rec.model_rmse)},"
                     f"{os.path.basename(csv_path)}")
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    write_manifest(resolved, os.path.join(out, "manifest.cfg"),
                   {"command": "rl", "achieved": str(log.achieved)})
    print(f"episodes: {len(log.episodes)}, best reward "
          f"{max(r.reward for r in log.episodes):.3f}, swing-up: {log.achieved}")
    return EXIT_OK if log.achieved else EXIT_NO_SWINGUP


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="odelearn",
        description="Identify continuous-time ODEs from noisy data and "
                    "use them for control.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="synthesize a dataset from a config")
    p_synth.add_argument("config")
    p_synth.add_argument("--out", default=None)

    p_train = sub.add_parser("train", help="train the identification networks")
    p_train.add_argument("config")
    p_train.add_argument("dataset")
    p_train.add_argument("--meta", default=None)
    p_train.add_argument("--out", default=None)

    p_eval = sub.add_parser("eval", help="simulate a checkpoint and report RMSE")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("dataset")
    p_eval.add_argument("--meta", default=None)
    p_eval.add_argument("--split", default="all")
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--method", default="euler")
    p_eval.add_argument("--substeps", type=int, default=1)
    p_eval.add_argument("--plot", action="store_true")

    p_rl = sub.add_parser("rl", help="run the episodic identify-and-control loop")
    p_rl.add_argument("config")
    p_rl.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args.config, out_dir=args.out)
        if args.command == "train":
            return cmd_train(args.config, args.dataset, meta_path=args.meta,
                             out_dir=args.out)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.dataset, split=args.split,
                            meta_path=args.meta, out_dir=args.out,
                            method=args.method, substeps=args.substeps,
                            plot=args.plot)
        if args.command == "rl":
            return cmd_rl(args.config, out_dir=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dynamics.BlowUpError, learner.TrainingError, control.ControlError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
