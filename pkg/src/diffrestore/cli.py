"""Command-line entry point: ``diffrestore {train,generate,restore,blind,storm,diagnose}``.

Every command is driven by a TOML config plus a few flag overrides and writes
its artifacts atomically into the output directory. All randomness comes from
named streams derived from the single run seed, so identical inputs reproduce
identical bytes.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import json
import logging
import os
import sys
import tempfile
import zlib
from pathlib import Path

import numpy as np

from . import operators as ops
from .posterior import (BlindConfig, LikelihoodConfig, NonFiniteGradient, ParametricFamily, RestorationReport,
                        blind_restore, restore, spectral_gain_predictor, storm_restore)
from .process import DEFAULT_PARAMS, KINDS, kernel_moments, make_process
from .score import (GaussianMixture, GmmScore, TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint,
                    train_score)
from .signal import Waveform, export_spectrogram, harmonic_frames, stft, wav_read, wav_write
from .solver import NonFiniteState, SamplerConfig, TrajectoryRecorder, discretize, integrate, sample
from .verify import gaussian_flow_map, mc_forward

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("diffrestore")

EXIT_CONFIG, EXIT_DIVERGED, EXIT_NONFINITE, EXIT_DIAGNOSE = 2, 3, 4, 5
COMMANDS = ("train", "generate", "restore", "blind", "storm", "diagnose")
SOLVER_FLAGS = {"em": "em", "ode": "ode_euler", "heun": "ode_heun"}

DEFAULTS = {
    "run": {"seed": 0, "out": "out"},
    "process": {"kind": "ve", "T": 1.0, "tau_eps": 1e-3},
    "data": {"source": "gmm", "weights": [0.5, 0.5], "means": [[-2.0], [2.0]], "variances": [[1.0], [1.0]],
             "path": "", "frame": 128, "frames": 20000, "f0_min": 150.0, "f0_max": 450.0},
    "train": {"steps": 1000, "batch_size": 256, "lr": 1e-3, "hidden": [128, 128], "weighting": "variance",
              "cond_dropout": 0.1, "checkpoint": "model.bin"},
    "model": {"kind": "gmm", "checkpoint": ""},
    "sampler": {"steps": 50, "scheme": "uniform", "solver": "em", "samples": 16, "guidance": -1.0,
                "condition": []},
    "operator": {"kind": "identity", "gap_fraction": 0.2, "cutoff_hz": 4000.0, "numtaps": 63, "taps_csv": "",
                 "t60": 0.3},
    "likelihood": {"mode": "dps", "zeta_prime": 0.3, "sigma_y": -1.0, "cost_domain": "waveform",
                   "compression": 0.5, "inflate": True},
    "blind": {"phi_init": [3000.0, 24.0], "lower": [200.0, 6.0], "upper": [7800.0, 120.0], "lr": 0.3,
              "steps_per_diffusion_step": 1, "warm_start": False},
    "storm": {"noise_std": 0.05, "gain_floor": 0.1},
    "diagnose": {"paths": 10000, "substeps": 500, "taus": [0.1, 0.3, 0.5, 0.8, 1.0], "x0": 1.0, "y": -0.5,
                 "z_max": 3.0, "sigma_corruption": 0.0},
}
PROCESS_KEYS = {k: set(v) for k, v in DEFAULT_PARAMS.items()}


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------


def load_config(path) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section, values in user.items():
        if section not in cfg or not isinstance(values, dict):
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in values.items():
            known = cfg[section]
            if key not in known and not (section == "process" and any(key in ks for ks in PROCESS_KEYS.values())):
                raise ConfigError(f"unknown config key {section}.{key}")
            cfg[section][key] = value
    return cfg


def apply_flags(cfg: dict, args) -> dict:
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.out is not None:
        cfg["run"]["out"] = args.out
    if args.steps is not None:
        cfg["train" if args.command == "train" else "sampler"]["steps"] = args.steps
    if args.process is not None:
        cfg["process"]["kind"] = args.process
    if args.solver is not None:
        cfg["sampler"]["solver"] = args.solver
    return cfg


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named subsystem of a run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def _stream_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(0, 2**63 - 1))


def build_process(cfg: dict):
    p = cfg["process"]
    kind = p["kind"]
    if kind not in KINDS:
        raise ConfigError(f"process.kind must be one of {KINDS}, got {kind!r}")
    params = {k: v for k, v in p.items() if k not in ("kind", "T", "tau_eps")}
    stray = set(params) - PROCESS_KEYS[kind]
    if stray:
        raise ConfigError(f"process.{sorted(stray)[0]} does not apply to {kind}")
    try:
        return make_process(kind, float(p["T"]), float(p["tau_eps"]), **params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"process: {exc}") from exc


def build_sampler(cfg: dict, seed: int) -> SamplerConfig:
    s = cfg["sampler"]
    if s["solver"] not in SOLVER_FLAGS:
        raise ConfigError(f"sampler.solver must be one of {sorted(SOLVER_FLAGS)}")
    guidance = None if s["guidance"] < 0 else float(s["guidance"])
    try:
        return SamplerConfig(int(s["steps"]), s["scheme"], SOLVER_FLAGS[s["solver"]], guidance, seed)
    except ValueError as exc:
        raise ConfigError(f"sampler: {exc}") from exc


def build_mixture(cfg: dict) -> GaussianMixture:
    d = cfg["data"]
    try:
        return GaussianMixture(np.asarray(d["weights"], dtype=float), np.asarray(d["means"], dtype=float),
                               np.asarray(d["variances"], dtype=float))
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"data: {exc}") from exc


def build_field(cfg: dict, process):
    m = cfg["model"]
    if m["kind"] == "gmm":
        return GmmScore(build_mixture(cfg), process)
    if m["kind"] == "checkpoint":
        path = m["checkpoint"]
        if not path or not Path(path).is_file():
            raise ConfigError(f"model.checkpoint: file not found: {path!r}")
        try:
            return load_checkpoint(path, process)
        except ValueError as exc:
            raise ConfigError(f"model.checkpoint: {exc}") from exc
    raise ConfigError("model.kind must be 'gmm' or 'checkpoint'")


def field_dim(field) -> int:
    return field.mixture.dim if isinstance(field, GmmScore) else field.dim


def build_operator(cfg: dict, n: int, sample_rate: int, length: int):
    """Operator acting on frames of ``n`` samples cut from a signal of ``length``."""
    o = cfg["operator"]
    kind = o["kind"]
    try:
        if kind == "identity":
            return ops.DegradationOperator("identity", {}, sample_rate)
        if kind == "mask":
            if not 0 <= o["gap_fraction"] < 1:
                raise ValueError("gap_fraction must lie in [0, 1)")
            mask = np.ones(length)
            gap = int(round(o["gap_fraction"] * length))
            start = (length - gap) // 2
            mask[start:start + gap] = 0.0
            return ops.mask_operator(frames_of(mask, n, fill=1.0), sample_rate)
        if kind == "ideal_lowpass":
            return ops.ideal_lowpass(o["cutoff_hz"], sample_rate)
        if kind == "fir_lowpass":
            taps = ops.load_taps_csv(o["taps_csv"]) if o["taps_csv"] else \
                ops.design_lowpass_fir(o["cutoff_hz"], int(o["numtaps"]), sample_rate)
            return ops.fir_operator(taps, "fir_lowpass", sample_rate)
        if kind == "rir_convolution":
            taps = ops.load_taps_csv(o["taps_csv"]) if o["taps_csv"] else \
                ops.synthetic_rir(o["t60"], sample_rate, rng=np.random.default_rng(0))
            return ops.fir_operator(taps, "rir_convolution", sample_rate)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"operator: {exc}") from exc
    raise ConfigError(f"operator.kind {kind!r} is not supported here")


def build_likelihood(cfg: dict) -> LikelihoodConfig:
    lk = cfg["likelihood"]
    try:
        return LikelihoodConfig(lk["mode"], float(lk["zeta_prime"]), None if lk["sigma_y"] < 0 else float(lk["sigma_y"]),
                                lk["cost_domain"], float(lk["compression"]), bool(lk["inflate"]))
    except ValueError as exc:
        raise ConfigError(f"likelihood: {exc}") from exc


# -- output helpers --------------------------------------------------------


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temporary sibling of ``path``; rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.stem}.", suffix=path.suffix)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_rows(path, header, rows) -> None:
    with atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_spectrogram(samples, sample_rate, path) -> None:
    tile = stft(Waveform(samples, sample_rate))
    path = Path(path)
    with atomic_path(path) as tmp:
        export_spectrogram(tile, tmp)
        os.replace(tmp.with_suffix(".csv"), path.with_suffix(".csv"))


def write_wav(path, samples, sample_rate) -> None:
    with atomic_path(path) as tmp:
        wav_write(tmp, Waveform(samples, sample_rate))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def log_resolved(cfg: dict, out: Path, command: str) -> None:
    resolved = {"command": command, **_jsonable(cfg)}
    log.info("resolved config:\n%s", json.dumps(resolved, indent=2, sort_keys=True))
    # the output directory is left out so reruns elsewhere give identical bytes
    resolved["run"] = {k: v for k, v in resolved["run"].items() if k != "out"}
    text = json.dumps(resolved, indent=2, sort_keys=True)
    with atomic_path(out / "resolved_config.json") as tmp:
        tmp.write_text(text + "\n")


def frames_of(x, n, fill=0.0):
    """Split a 1-D signal into padded rows of length ``n``."""
    count = max(1, -(-len(x) // n))
    buf = np.full(count * n, fill)
    buf[:len(x)] = x
    return buf.reshape(count, n)


def read_input(path) -> Waveform:
    if path is None:
        raise ConfigError("this command needs an input WAV file")
    if not Path(path).is_file():
        raise ConfigError(f"input file not found: {path}")
    try:
        return wav_read(path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# -- commands --------------------------------------------------------------


def load_training_data(cfg: dict, seed: int):
    d = cfg["data"]
    src = d["source"]
    if src == "gmm":
        return build_mixture(cfg)
    if src == "harmonic":
        return harmonic_frames(int(d["frames"]), int(d["frame"]), rng=stream(seed, "data"),
                               f0_range=(d["f0_min"], d["f0_max"]))
    if src == "wav_dir":
        path = d["path"]
        if not path or not Path(path).is_dir():
            raise ConfigError(f"data.path: dataset directory not found: {path!r}")
        files = sorted(Path(path).glob("*.wav"))
        if not files:
            raise ConfigError(f"data.path: no .wav files in {path}")
        n = int(d["frame"])
        chunks = []
        for f in files:
            x = read_input(f).samples
            usable = len(x) // n * n
            if usable:
                chunks.append(x[:usable].reshape(-1, n))
        if not chunks:
            raise ConfigError(f"data.frame: every file in {path} is shorter than {n} samples")
        return np.concatenate(chunks)
    raise ConfigError("data.source must be gmm, harmonic or wav_dir")


def cmd_train(cfg, out: Path, args) -> int:
    process = build_process(cfg)
    seed = cfg["run"]["seed"]
    data = load_training_data(cfg, seed)
    if process.requires_y:
        raise ConfigError("process.kind: training supports ve and vp; task-adapted models need paired data")
    t = cfg["train"]
    try:
        tcfg = TrainConfig(int(t["batch_size"]), int(t["steps"]), float(t["lr"]), seed=_stream_seed(seed, "train"),
                           weighting=t["weighting"], cond_dropout=float(t["cond_dropout"]),
                           hidden=tuple(int(h) for h in t["hidden"]))
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
    model = train_score(data, process, tcfg)
    with atomic_path(out / t["checkpoint"]) as tmp:
        save_checkpoint(model, tmp)
    write_rows(out / "loss.csv", ["step", "loss"], [(i, float(v)) for i, v in enumerate(model.loss_history)])
    log.info("trained %d steps, final loss %.6g", len(model.loss_history), model.loss_history[-1])
    return 0


def cmd_generate(cfg, out: Path, args) -> int:
    process = build_process(cfg)
    if process.requires_y:
        raise ConfigError("process.kind: generation needs an unconditional process (ve or vp)")
    field = build_field(cfg, process)
    seed = cfg["run"]["seed"]
    scfg = build_sampler(cfg, seed)
    n = int(cfg["sampler"]["samples"])
    dim = field_dim(field)
    cond = cfg["sampler"]["condition"] or None
    if cond is not None:
        cond = np.asarray(cond, dtype=float)
    recorder = TrajectoryRecorder(process)
    x = sample(process, field, scfg, conditioning=cond, shape=(n, dim), rng=stream(seed, "sample"),
               callback=recorder)
    write_rows(out / "samples.csv", [f"x{i}" for i in range(dim)], [[float(v) for v in row] for row in x])
    with atomic_path(out / "trajectory.csv") as tmp:
        recorder.write_csv(tmp)
    return 0


def _restoration_setup(cfg, args):
    process = build_process(cfg)
    field = build_field(cfg, process)
    wav = read_input(args.input)
    n = field_dim(field)
    y = frames_of(wav.samples, n)
    return process, field, wav, n, y


def _finish_audio(out: Path, wav: Waveform, x0, report: RestorationReport) -> None:
    restored = np.asarray(x0).reshape(-1)[: len(wav.samples)]
    write_wav(out / "output.wav", restored, wav.sample_rate)
    with atomic_path(out / "report.csv") as tmp:
        report.write_csv(tmp)
    write_spectrogram(wav.samples, wav.sample_rate, out / "input_spectrogram.pgm")
    write_spectrogram(restored, wav.sample_rate, out / "output_spectrogram.pgm")


def cmd_restore(cfg, out: Path, args) -> int:
    process, field, wav, n, y = _restoration_setup(cfg, args)
    seed = cfg["run"]["seed"]
    op = build_operator(cfg, n, wav.sample_rate, len(wav.samples))
    lik = build_likelihood(cfg)
    if lik.mode == "projection" and op.kind not in ("identity", "mask", "ideal_lowpass"):
        raise ConfigError(f"likelihood.mode: projection has no closed form for {op.kind}")
    report = RestorationReport()
    x0 = restore(y, op, process, field, build_sampler(cfg, seed), lik, rng=stream(seed, "sample"), report=report)
    _finish_audio(out, wav, x0, report)
    return 0


def cmd_blind(cfg, out: Path, args) -> int:
    process, field, wav, n, y = _restoration_setup(cfg, args)
    seed = cfg["run"]["seed"]
    b = cfg["blind"]
    family = ParametricFamily(tuple(b["lower"]), tuple(b["upper"]), wav.sample_rate)
    try:
        bcfg = BlindConfig(tuple(b["phi_init"]), tuple(b["lower"]), tuple(b["upper"]), float(b["lr"]),
                           int(b["steps_per_diffusion_step"]), bool(b["warm_start"]))
        ops.OperatorParams.from_phi(bcfg.phi_init, family.lower, family.upper)
    except ValueError as exc:
        raise ConfigError(f"blind.phi_init: {exc}") from exc
    lik = build_likelihood(cfg)
    if lik.mode != "dps":
        raise ConfigError("likelihood.mode must be dps for blind restoration")
    res = blind_restore(y, family, process, field, build_sampler(cfg, seed), bcfg, lik, rng=stream(seed, "sample"))
    _finish_audio(out, wav, res.x0, res.report)
    write_rows(out / "phi.csv", ["step", "cutoff_hz", "slope_db_per_octave"],
               [(i, float(p[0]), float(p[1])) for i, p in enumerate(res.phi_trace)])
    if res.bound_warning:
        log.warning("phi stayed at a bound for most steps; widen blind.lower/upper")
    log.info("estimated cutoff %.1f Hz, slope %.2f dB/octave", *res.phi)
    return 0


def cmd_storm(cfg, out: Path, args) -> int:
    process, field, wav, n, y = _restoration_setup(cfg, args)
    if not process.requires_y:
        raise ConfigError("process.kind: storm needs a task-adapted process (ouve or bbed)")
    seed = cfg["run"]["seed"]
    s = cfg["storm"]
    predictor = spectral_gain_predictor(float(s["noise_std"]), float(s["gain_floor"]))
    x0 = storm_restore(y, predictor, process, field, build_sampler(cfg, seed), rng=stream(seed, "sample"))
    report = RestorationReport()
    report.add(0, 0.0, float(np.linalg.norm(x0 - predictor(y))))
    _finish_audio(out, wav, x0, report)
    return 0


def _convergence_rows(kind, solver, Ns):
    """Terminal error of the probability-flow ODE against its closed form."""
    process = make_process(kind)
    mean, var = np.array([0.7]), np.array([0.25])
    grid_start = np.array([2.0])
    rows = []
    for N in Ns:
        grid = discretize(process.tau_max, process.tau_eps, N, "uniform", process)
        field = GmmScore(GaussianMixture([1.0], [mean], [np.diag(var)]), process)
        x = integrate(process, field, grid_start, grid, solver)
        exact = gaussian_flow_map(mean, var, process, grid_start, process.tau_max, process.tau_eps)
        rows.append((N, float(abs(x - exact)[0])))
    return rows


def cmd_diagnose(cfg, out: Path, args) -> int:
    dg = cfg["diagnose"]
    seed = cfg["run"]["seed"]
    rng = stream(seed, "mc")
    corruption = float(dg["sigma_corruption"])
    rows = []
    ok = True
    for kind in KINDS:
        process = make_process(kind)
        y = dg["y"] if process.requires_y else None
        for frac in dg["taus"]:
            tau = float(frac) * process.T
            km = kernel_moments(process, np.array([dg["x0"]]), None if y is None else np.array([y]), tau)
            std = km.std * (1.0 + corruption)
            mc = mc_forward(process, dg["x0"], y, tau, int(dg["paths"]), int(dg["substeps"]),
                            seed=int(rng.integers(0, 2**31 - 1)))
            se_mean = float(mc.std_error[0])
            se_std = float(mc.std[0]) / np.sqrt(2.0 * mc.paths)
            z_mean = abs(float(mc.mean[0] - km.mean[0])) / max(se_mean, 1e-9)
            z_std = abs(float(mc.std[0]) - float(std)) / max(se_std, 1e-9)
            passed = z_mean <= dg["z_max"] and z_std <= dg["z_max"]
            ok &= passed
            rows.append(("kernel", kind, tau, float(km.mean[0]), float(mc.mean[0]), float(std), float(mc.std[0]),
                         float(z_mean), float(z_std), "pass" if passed else "fail"))
    write_rows(out / "kernel_check.csv",
               ["check", "process", "tau", "mean_closed", "mean_mc", "std_closed", "std_mc", "z_mean", "z_std",
                "result"], rows)

    conv = []
    euler = _convergence_rows("ve", "ode_euler", [10, 20, 30, 50, 100, 300])
    heun = _convergence_rows("ve", "ode_heun", [20, 50])
    errs = {N: e for N, e in euler}
    mono = all(errs[a] > errs[b] for a, b in [(10, 30), (30, 100), (100, 300)])
    for N, e in euler:
        conv.append(("euler", N, e, "pass" if mono else "fail"))
    for N, e in heun:
        passed = e <= errs[N]
        ok &= passed
        conv.append(("heun", N, e, "pass" if passed else "fail"))
    ok &= mono
    write_rows(out / "solver_convergence.csv", ["solver", "steps", "terminal_error", "result"], conv)
    if not ok:
        log.error("diagnostics failed; see %s", out)
        return EXIT_DIAGNOSE
    log.info("all diagnostics passed")
    return 0


HANDLERS = {"train": cmd_train, "generate": cmd_generate, "restore": cmd_restore, "blind": cmd_blind,
            "storm": cmd_storm, "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffrestore", description="Diffusion-based signal restoration toolkit.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("input", nargs="?", help="input WAV for restore, blind and storm")
    ap.add_argument("--config", help="TOML config file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--steps", type=int, help="training steps (train) or diffusion steps (others)")
    ap.add_argument("--process", choices=KINDS)
    ap.add_argument("--solver", choices=sorted(SOLVER_FLAGS))
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _limit_threads():
    n = os.environ.get("DIFFRESTORE_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = apply_flags(load_config(args.config), args)
        out = Path(cfg["run"]["out"])
        out.mkdir(parents=True, exist_ok=True)
        log_resolved(cfg, out, args.command)
        with _limit_threads():
            return HANDLERS[args.command](cfg, out, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except (NonFiniteState, NonFiniteGradient) as exc:
        log.error("%s", exc)
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
