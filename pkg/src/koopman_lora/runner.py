"""Experiment pipeline behind the command line: oracles, training, evaluation.

Every random draw comes from ``derive_rng(run.seed, stream)`` with fixed
stream numbers, so a run is reproduced exactly by its config alone:

==  =====================================
0   training trajectories
1   parameter initialisation
2   minibatch order and split marginals
3   held-out test trajectory
==  =====================================
"""
from __future__ import annotations

import math
import os
import time

import numpy as np

from . import groundtruth as gt
from . import inference, io, linalg, metrics, systems
from .autonn import EncoderSpec, encoder_apply, fd_jet, init_params, load_checkpoint, save_checkpoint
from .errors import DivergenceError, InvalidInputError
from .losses import LossConfig, generator_action, make_loss
from .training import OptimConfig, encoder_map, train_generator, train_pairs

__all__ = [
    "UsageError",
    "system_from_config",
    "build_data",
    "run_oracle",
    "run_train",
    "run_eval",
    "FIXTURES",
    "fixture_dir",
]

STREAM_DATA, STREAM_INIT, STREAM_TRAIN, STREAM_TEST = 0, 1, 2, 3

FIXTURES = {
    "sigma": "sigma_true.csv",
    "eig": "eig_true.csv",
    "generator_eig": "generator_eig_true.csv",
    "generator_efun": "generator_efun_true.csv",
}


class UsageError(InvalidInputError):
    """Configuration or file problem that maps to exit code 2."""


def fixture_dir(name):
    """Directory of a packaged golden fixture set (``logistic``, ``schwantes``, ``ou``, ``chain2``)."""
    from importlib import resources

    path = resources.files("koopman_lora") / "data" / name
    if not path.is_dir():
        raise UsageError(f"no packaged fixtures named {name!r}")
    return str(path)


# -- systems and data -----------------------------------------------------------

def system_from_config(cfg):
    name = cfg.get_str("system.name")
    if name == "logistic":
        return systems.LogisticSpec(cfg.get_float("system.r", 4.0), cfg.get_int("system.noise_order", 20))
    if name == "langevin":
        return systems.LangevinSpec(cfg.get_str("system.potential", "schwantes"), cfg.get_float("system.gamma", 0.1),
                                    cfg.get_float("system.kbt", 1.0), cfg.get_float("system.dt", 1e-4),
                                    cfg.get_int("system.stride", 10))
    if name == "finite_chain":
        return systems.FiniteChainSpec(cfg.matrix("system.transition"))
    if name == "cyclic_gaussian":
        return systems.CyclicGaussianSpec(cfg.get_int("system.n_states", 5), cfg.get_int("system.dim", 16),
                                          cfg.get_float("system.spread", 0.3), cfg.get_float("system.separation", 3.0))
    raise UsageError(f"unknown system {name!r}")


def _trajectories(spec, cfg, rng, length):
    n = cfg.get_int("data.trajectories", 1)
    burn = cfg.get_float("data.burn_in", -1.0)
    return [systems.sample_trajectory(spec, length, rng, burn_in=None if burn < 0 else burn) for _ in range(n)]


def build_data(cfg, spec=None):
    """Training pairs, test pairs and the raw training trajectories (empty when enumerated)."""
    spec = spec or system_from_config(cfg)
    seed = cfg.seed
    lag = cfg.get_int("data.lag", 1)
    split = cfg.get_str("data.marginals", "pooled") == "split"
    if isinstance(spec, systems.FiniteChainSpec) and cfg.get_bool("data.enumerate", False):
        pairs = systems.enumerate_chain(spec.transition)
        if lag != 1:
            pairs = systems.enumerate_chain(np.linalg.matrix_power(spec.transition, lag))
        return pairs, pairs, []
    length = cfg.get_int("data.length")
    trajs = _trajectories(spec, cfg, systems.derive_rng(seed, STREAM_DATA), length)
    test_len = cfg.get_int("data.test_length", max(length // 4, lag + 2))
    test = systems.sample_trajectory(spec, test_len, systems.derive_rng(seed, STREAM_TEST))
    return systems.make_pairs(trajs, lag, split), systems.make_pairs(test, lag), trajs + [test]


def _input_fn(spec):
    return lambda states: systems.featurize(spec, states)


def _input_dim(spec):
    if isinstance(spec, systems.FiniteChainSpec):
        return spec.n_states
    if isinstance(spec, systems.CyclicGaussianSpec):
        return spec.dim
    return 1


def encoder_specs(cfg, spec, generator=False):
    k = cfg.get_int("encoder.modes")
    constant = cfg.get_bool("encoder.constant", True)
    modes = k - 1 if constant else k
    if modes < 1:
        raise UsageError("encoder.modes leaves no learnable mode")
    enc = EncoderSpec(_input_dim(spec), cfg.get_list("encoder.hidden", (), int), modes,
                      cfg.get_str("encoder.activation", "leaky_relu"), constant)
    if generator or cfg.get_bool("encoder.shared", False):
        return {"f": enc}
    return {"f": enc, "g": enc}


def loss_from_config(cfg):
    return LossConfig(
        kind=cfg.get_str("loss.kind", "lora"), r=cfg.get_int("loss.r", 2), lam=cfg.get_float("loss.lam", 1e-6),
        gamma=cfg.get_float("loss.gamma", 1.0), nesting_weights=cfg.get_list("loss.nesting_weights", (), float),
        time_scale=cfg.get_float("loss.time_scale", -1.0) if cfg.has("loss.time_scale") else None,
        generator_nesting=(None if cfg.get_str("loss.nesting", "none") == "none" else cfg.get_str("loss.nesting")),
    )


def optim_from_config(cfg):
    return OptimConfig(
        lr=cfg.get_float("optim.lr", 1e-3), batch_size=cfg.get_int("optim.batch_size", 1024),
        epochs=cfg.get_int("optim.epochs", 1), steps=cfg.get_int("optim.steps", -1) if cfg.has("optim.steps") else None,
        ema_decay=cfg.get_float("optim.ema_decay", 0.0), marginals=cfg.get_str("data.marginals", "pooled"),
    )


# -- oracle ------------------------------------------------------------------

def _spectrum_rows(values):
    values = np.asarray(values, dtype=np.complex128)
    order = sorted(range(values.size), key=lambda i: (-round(abs(values[i]), 12), -values[i].real, values[i].imag))
    return [(j + 1, float(values[i].real), float(values[i].imag)) for j, i in enumerate(order)]


def _default_interval(cfg, potential):
    if cfg.has("oracle.interval"):
        a, b = cfg.get_list("oracle.interval", cast=float)
        return (a, b)
    return {"schwantes": (-1.5, 1.5), "ou": (-8.0, 8.0)}.get(potential, (-1.0, 1.0))


def run_oracle(cfg, out):
    """Write reference fixtures for the configured system into ``out``; returns the file list."""
    spec = system_from_config(cfg)
    os.makedirs(out, exist_ok=True)
    written = []
    if isinstance(spec, systems.LogisticSpec):
        kernel = gt.logistic_kernel(spec.noise_order, spec.r)
        grid = gt.midpoint_grid(cfg.get_int("oracle.grid", 4096))
        rho = gt.stationary_density(kernel, grid)
        grid = grid.with_densities(rho, rho)
        sigma = gt.finite_rank_svd(kernel, grid).sigma
        eig = gt.finite_rank_spectrum(kernel, grid).right.eigenvalues
    elif isinstance(spec, systems.FiniteChainSpec):
        p = spec.transition
        kernel = gt.chain_kernel(p)
        rho = systems.stationary_distribution(p)
        grid = gt.chain_grid(p.shape[0]).with_densities(rho, rho @ p)
        sigma = gt.finite_rank_svd(kernel, grid).sigma
        eig = linalg.eig_general(p).eigenvalues
    elif isinstance(spec, systems.LangevinSpec):
        ref = gt.generator_reference(spec.potential, spec.gamma, spec.kbt, _default_interval(cfg, spec.potential),
                                     cfg.get_int("oracle.n_grid", 2048), cfg.get_int("oracle.n_modes", 10))
        path = os.path.join(out, FIXTURES["generator_eig"])
        io.write_csv(path, ("index", "eigenvalue"), [(j + 1, float(v)) for j, v in enumerate(ref.eigenvalues)])
        written.append(path)
        path = os.path.join(out, FIXTURES["generator_efun"])
        n = ref.eigenfunctions.shape[1]
        rows = [(float(x), float(w), *map(float, f)) for x, w, f in zip(ref.nodes, ref.pi * ref.h, ref.eigenfunctions)]
        io.write_csv(path, ("x", "weight", *[f"f{j}" for j in range(n)]), rows)
        written.append(path)
        return written
    else:
        raise UsageError(f"no oracle for system {spec.tag!r}; choose logistic, langevin or finite_chain")
    path = os.path.join(out, FIXTURES["sigma"])
    io.write_csv(path, ("index", "sigma"), [(j + 1, float(s)) for j, s in enumerate(sigma)])
    written.append(path)
    path = os.path.join(out, FIXTURES["eig"])
    io.write_csv(path, ("index", "re", "im"), _spectrum_rows(eig))
    written.append(path)
    return written


def read_fixture(directory, kind):
    path = os.path.join(directory, FIXTURES[kind])
    if not os.path.exists(path):
        raise UsageError(f"missing fixture {path}; run the oracle command first")
    header, rows = io.read_csv(path)
    data = np.array([[float(v) for v in r] for r in rows])
    if kind == "sigma":
        return data[:, 1]
    if kind == "eig":
        return data[:, 1] + 1j * data[:, 2]
    if kind == "generator_eig":
        return data[:, 1]
    return data  # x, weight, f0..


# -- training ------------------------------------------------------------------

def _write_log(path, log):
    io.write_csv(path, ("epoch", "loss", "wall_time"), log)


def run_train(cfg, out):
    """Train the configured encoders; writes ``checkpoint.bin`` and ``train_log.csv``.

    Raises :class:`DivergenceError` after writing the partial log when the loss
    or a gradient becomes non-finite.
    """
    spec = system_from_config(cfg)
    loss_cfg = loss_from_config(cfg)
    opt = optim_from_config(cfg)
    generator = loss_cfg.kind == "lora_generator"
    if generator and not isinstance(spec, systems.LangevinSpec):
        raise UsageError("lora_generator needs a langevin system")
    specs = encoder_specs(cfg, spec, generator)
    params = init_params(specs, systems.derive_rng(cfg.seed, STREAM_INIT))
    rng = systems.derive_rng(cfg.seed, STREAM_TRAIN)
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    try:
        if generator:
            if loss_cfg.time_scale is None:
                raise UsageError("lora_generator needs loss.time_scale")
            trajs = _trajectories(spec, cfg, systems.derive_rng(cfg.seed, STREAM_DATA), cfg.get_int("data.length"))
            x = np.concatenate([t.states[:, 0] for t in trajs])
            result = train_generator(specs["f"], params, x, spec.force(x), spec.gamma, spec.kbt, opt, rng,
                                     loss_cfg.time_scale, loss_cfg.generator_nesting,
                                     cfg.get_float("loss.fd_step", 1e-3))
        else:
            pairs, _, _ = build_data(cfg, spec)
            feat = _input_fn(spec)
            result = train_pairs(specs, params, feat(pairs.x), feat(pairs.xp),
                                 make_loss(loss_cfg, specs["f"].output_dim), opt, rng, pairs.weights,
                                 pairs.rho0_idx, pairs.rho1_idx)
    except DivergenceError as exc:
        _write_log(os.path.join(out, "train_log.csv"), exc.partial or [])
        raise
    _write_log(os.path.join(out, "train_log.csv"), result.log)
    save_checkpoint(os.path.join(out, "checkpoint.bin"), specs, result.final_params, cfg.seed, result.steps,
                    {"config_hash": cfg.hash(), "loss": loss_cfg.kind, "ema_decay": opt.ema_decay})
    io.write_keyvalue(os.path.join(out, "train_meta.txt"),
                      {"config_hash": cfg.hash(), "steps": result.steps,
                       "wall_time": f"{time.perf_counter() - t0:.3f}"})
    return result


# -- evaluation ------------------------------------------------------------------

def _default_metrics(spec, generator):
    if generator:
        return ("generator",)
    if isinstance(spec, systems.LogisticSpec):
        return ("sigma", "hausdorff", "spectrum", "vamp")
    if isinstance(spec, systems.FiniteChainSpec):
        return ("sigma", "hausdorff", "spectrum", "prediction", "vamp")
    if isinstance(spec, systems.CyclicGaussianSpec):
        return ("spectrum", "prediction", "vamp")
    return ("spectrum", "vamp")


def _observables(spec, names):
    """``name -> callable(states)``; cluster/state indicators expand per class."""
    obs = {}
    for name in names:
        if name == "constant":
            obs["constant"] = lambda x: np.ones(np.asarray(x).shape[0])
        elif name == "identity":
            obs["identity"] = lambda x: np.asarray(x, dtype=np.float64)[:, 0]
        elif name == "indicator":
            if isinstance(spec, systems.CyclicGaussianSpec):
                for c in range(spec.n_states):
                    obs[f"indicator{c}"] = lambda x, c=c: (spec.classify(x) == c).astype(np.float64)
            elif isinstance(spec, systems.FiniteChainSpec):
                for c in range(spec.n_states):
                    obs[f"indicator{c}"] = lambda x, c=c: (np.ravel(x) == c).astype(np.float64)
            else:
                raise UsageError("indicator observables need a cyclic_gaussian or finite_chain system")
        else:
            raise UsageError(f"unknown observable {name!r}")
    return obs


def _prediction_cases(spec, test_pairs, test_traj, h, t, direction):
    """Conditioning states and reference values for one horizon.

    forward: condition on ``x_s``, target ``E[h(x_{s+t}) | x_s]``; backward:
    condition on ``x_{s+t}``, target ``E[h(x_s) | x_{s+t}]``.
    """
    if isinstance(spec, systems.FiniteChainSpec):
        p = spec.transition
        n = p.shape[0]
        states = np.arange(n, dtype=np.float64).reshape(-1, 1)
        hv = h(states)
        pt = np.linalg.matrix_power(p, t)
        if direction == "forward":
            return states, pt @ hv
        rho = systems.stationary_distribution(p)
        joint = rho[:, None] * pt
        return states, (joint * hv[:, None]).sum(0) / joint.sum(0)
    states, labels = test_traj.states, test_traj.labels
    if direction == "forward":
        cond = states[:-t]
        if labels is not None and isinstance(spec, systems.CyclicGaussianSpec):
            centers = spec.centers()
            return cond, h(centers[(labels[:-t] + t) % spec.n_states])
        return cond, h(states[t:])
    cond = states[t:]
    if labels is not None and isinstance(spec, systems.CyclicGaussianSpec):
        return cond, h(spec.centers()[(labels[t:] - t) % spec.n_states])
    return cond, h(states[:-t])


def _eval_generator(cfg, spec, specs, params, report, fixtures, out):
    loss_cfg = loss_from_config(cfg)
    trajs = _trajectories(spec, cfg, systems.derive_rng(cfg.seed, STREAM_DATA), cfg.get_int("data.length"))
    x = np.concatenate([t.states[:, 0] for t in trajs])
    n_eval = cfg.get_int("eval.eval_points", 0)
    if 0 < n_eval < x.size:
        x = x[np.linspace(0, x.size - 1, n_eval).astype(np.int64)]
    enc = specs["f"]
    tau = loss_cfg.time_scale
    jet = fd_jet(enc, params, x, h=cfg.get_float("loss.fd_step", 1e-3))
    af = generator_action(jet, spec.force(x), spec.gamma, spec.kbt, tau)
    ritz = inference.generator_ritz(jet.value, af, time_scale=tau)
    report.extend("generator_eigenvalue", ritz.eigenvalues, range(1, ritz.eigenvalues.size + 1))
    ref_eig = read_fixture(fixtures, "generator_eig")
    efun = read_fixture(fixtures, "generator_efun")
    nodes, w, ref_f = efun[:, 0], efun[:, 1], efun[:, 2:]
    est = encoder_apply(enc, params, nodes.reshape(-1, 1)) @ ritz.coef
    rows = []
    for j in range(min(ritz.eigenvalues.size, ref_eig.size, ref_f.shape[1])):
        lam, lam_ref = ritz.eigenvalues[j], ref_eig[j]
        err = abs(lam - lam_ref) / abs(lam_ref) if lam_ref != 0 else abs(lam)
        cos = abs(metrics.cosine_similarity(est[:, j], ref_f[:, j], w))
        report.add("generator_eig_rel_error", err, j + 1)
        report.add("generator_cosine", cos, j + 1)
        # sign-aligned, unit L2(pi) estimate on the fixture grid for plotting
        f = est[:, j] / math.sqrt(max(float(np.sum(w * est[:, j] ** 2)), 1e-300))
        f = f if np.sum(w * f * ref_f[:, j]) >= 0 else -f
        rows.extend((j + 1, float(xv), float(fv), float(rv)) for xv, fv, rv in zip(nodes, f, ref_f[:, j]))
    io.write_csv(os.path.join(out, "generator_eigenfunctions.csv"), ("mode", "x", "estimate", "reference"), rows)


def run_eval(cfg, out, checkpoint=None):
    """Evaluate a checkpoint; writes ``metrics.csv``, plot CSVs and ``eval_meta.txt``.

    Returns the :class:`~koopman_lora.metrics.MetricReport`.
    """
    t0 = time.perf_counter()
    spec = system_from_config(cfg)
    checkpoint = checkpoint or cfg.get_str("eval.checkpoint", os.path.join(out, "checkpoint.bin"))
    if not os.path.exists(checkpoint):
        raise UsageError(f"checkpoint {checkpoint} not found; run the train command first")
    specs, params, _ = load_checkpoint(checkpoint)
    fixtures = cfg.get_str("eval.fixtures", out)
    loss_cfg = loss_from_config(cfg)
    generator = loss_cfg.kind == "lora_generator"
    wanted = cfg.get_list("eval.metrics", _default_metrics(spec, generator))
    # check fixtures up front so a missing file is a usage error before any work
    needs = {"sigma": ["sigma"], "hausdorff": ["eig"], "generator": ["generator_eig", "generator_efun"]}
    for m in wanted:
        for kind in needs.get(m, []):
            read_fixture(fixtures, kind)
    os.makedirs(out, exist_ok=True)
    report = metrics.MetricReport(cfg.hash(), cfg.seed)

    if generator:
        _eval_generator(cfg, spec, specs, params, report, fixtures, out)
    else:
        _eval_pairs(cfg, spec, specs, params, report, fixtures, out, wanted)

    report.write(os.path.join(out, "metrics.csv"))
    report.wall_time = time.perf_counter() - t0
    io.write_keyvalue(os.path.join(out, "eval_meta.txt"),
                      {"config_hash": cfg.hash(), "seed": cfg.seed, "wall_time": f"{report.wall_time:.3f}"})
    return report


def _eval_pairs(cfg, spec, specs, params, report, fixtures, out, wanted):
    pairs, test_pairs, trajs = build_data(cfg, spec)
    feat = _input_fn(spec)
    g_prefix = "g" if "g" in specs else "f"
    f_map = encoder_map(specs["f"], params, "f", feat)
    g_map = encoder_map(specs[g_prefix], params, g_prefix, feat)
    model = inference.cca_fit(pairs, f_map, g_map)
    for w in model.warnings:
        report.add("warning_rank_deficient", 1.0, w.split(" ")[0])
    k = model.sigma.size
    report.extend("sigma_hat", model.sigma, range(1, k + 1))

    if "sigma" in wanted:
        sigma_true = read_fixture(fixtures, "sigma")
        m = min(k, sigma_true.size)
        keep = sigma_true[:m] > 1e-12
        idx = np.arange(1, m + 1)[keep]
        err = metrics.rel_sq_sv_error(sigma_true[:m][keep], model.sigma[:m][keep])
        report.extend("rel_sq_sv_error", err, idx)
        top = err[1:6] if err.size > 1 else err
        report.add("rel_sq_sv_error_top5_mean_abs", float(np.mean(np.abs(top))))
        io.write_csv(os.path.join(out, "singular_values.csv"), ("mode", "sigma_true", "sigma_hat", "rel_sq_error"),
                     [(int(i), float(s), float(h), float(e))
                      for i, s, h, e in zip(idx, sigma_true[:m][keep], model.sigma[:m][keep], err)])

    dt = (trajs[0].dt if trajs else 1.0) * cfg.get_int("data.lag", 1)
    if "spectrum" in wanted:
        right, _ = inference.cca_spectrum(model)
        rows = _spectrum_rows(right.eigenvalues)
        for j, re, im in rows:
            report.add("eigenvalue_re", re, j)
            report.add("eigenvalue_im", im, j)
        for j, re, im in rows[1:]:
            tau = metrics.relaxation_time(complex(re, im), dt)
            if math.isfinite(tau):
                report.add("relaxation_time", tau, j)
        io.write_csv(os.path.join(out, "eigenvalues.csv"), ("index", "re", "im", "modulus"),
                     [(j, re, im, abs(complex(re, im))) for j, re, im in rows])

    if "hausdorff" in wanted:
        eig_true = read_fixture(fixtures, "eig")
        n_ref = cfg.get_int("eval.reference_size", 3 if isinstance(spec, systems.LogisticSpec) else eig_true.size)
        ref = eig_true[:n_ref]
        basis_name = cfg.get_str("eval.basis", "g")
        b_full = f_map if basis_name == "f" else g_map
        rows = []
        for i in range(1, k + 1):
            e = inference.edmd_fit(pairs, lambda x, i=i: b_full(x)[:, :i], basis=basis_name)
            lam = e.spectrum("forward").eigenvalues
            fwd = metrics.directed_hausdorff(lam, ref)
            rev = metrics.directed_hausdorff(ref, lam)
            report.add("hausdorff", fwd, i)
            report.add("hausdorff_reverse", rev, i)
            rows.extend((i, j + 1, float(v.real), float(v.imag)) for j, v in enumerate(lam))
        io.write_csv(os.path.join(out, "edmd_eigenvalues.csv"), ("prefix", "index", "re", "im"), rows)

    if "vamp" in wanted:
        scores = metrics.vamp_scores(model, test_pairs)
        report.add("vamp2", scores.vamp2)
        report.add("vampE", scores.vampE)

    if "prediction" in wanted:
        horizon = cfg.get_int("eval.horizons", 15)
        routes = cfg.get_list("eval.routes", ("cca", "edmd"))
        obs = _observables(spec, cfg.get_list("eval.observables", ("indicator", "constant")))
        basis_name = cfg.get_str("eval.basis", "g")
        edmd = inference.edmd_fit(pairs, f_map if basis_name == "f" else g_map, basis=basis_name)
        test_traj = trajs[-1] if trajs else None
        rows = []
        for route in routes:
            if route not in ("cca", "edmd"):
                raise UsageError(f"unknown prediction route {route!r}")
            for name, h in obs.items():
                for t in [s for s in range(-horizon, horizon + 1) if s != 0]:
                    direction = "forward" if t > 0 else "backward"
                    cond, truth = _prediction_cases(spec, test_pairs, test_traj, h, abs(t), direction)
                    if route == "cca":
                        pred = inference.cca_predict(model, cond, h, abs(t), direction)
                    else:
                        pred = inference.edmd_predict(edmd, cond, h, abs(t), direction)
                    rmse = metrics.prediction_rmse(pred, truth)
                    report.add(f"rmse_{route}_{name}", rmse, t)
                    rows.append((route, name, t, rmse))
        io.write_csv(os.path.join(out, "prediction.csv"), ("route", "observable", "t", "rmse"), rows)
