"""Command-line entry point. Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import CCDGanError, DataError, MissingArtifact, UsageError
from .tfa import TfaConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _tfa(args) -> TfaConfig:
    return TfaConfig.from_json(args.tfa_config) if getattr(args, "tfa_config", None) else TfaConfig()


def _read_matrix(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifact(f"matrix file not found: {p}")
    try:
        m = np.loadtxt(p, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{p}: not a whitespace-delimited numeric matrix ({exc})") from exc
    return m


def cmd_spec(args) -> int:
    from .signal import load_wav
    from .tfa import cwt_forward, save_spectrogram

    s = cwt_forward(load_wav(args.input), _tfa(args))
    save_spectrogram(s, args.out)
    print(f"wrote {args.out}: {s.shape[0]} scales x {s.shape[1]} samples")
    return 0


def _load_grid_dir(root: Path, size: int):
    from .tfa import grid_range, load_spectrogram, spectrogram_grid, to_unit

    index = root / "labels.tsv"
    if not index.is_file():
        raise MissingArtifact(f"label index not found: {index}")
    grids, labels = [], []
    for n, line in enumerate(index.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{index}:{n}: expected filename<TAB>class_id")
        g = spectrogram_grid(load_spectrogram(root / parts[0]), size)
        grids.append(to_unit(g, *grid_range(g)))
        labels.append(int(parts[1]))
    if not grids:
        raise DataError(f"{index} lists no items")
    return grids, labels


def cmd_train_gan(args) -> int:
    from .ccgan import checkpoint as ckpt_io
    from .ccgan.nets import DiscriminatorConfig, GeneratorConfig
    from .ccgan.train import TrainingConfig, gan_train

    size = 128 if args.preset == "paper" else 32
    grids, labels = _load_grid_dir(Path(args.data), size)
    n_classes = max(labels) + 1
    if args.preset == "paper":
        gcfg, dcfg = GeneratorConfig.paper(n_classes), DiscriminatorConfig.paper(n_classes)
        tcfg = TrainingConfig(batch_size=min(256, len(grids)), seed=args.seed,
                              max_iters=args.iters or 2000)
    else:
        gcfg, dcfg = GeneratorConfig(n_classes=n_classes), DiscriminatorConfig(n_classes=n_classes, channels=8)
        tcfg = TrainingConfig.desk(seed=args.seed, max_iters=args.iters or TrainingConfig.desk().max_iters,
                                   batch_size=min(32, len(grids)))

    def progress(it, d, g):
        if it % 50 == 0:
            print(f"iter {it}: d_loss {d:.4f} g_loss {g:.4f}", flush=True)

    res = gan_train(grids, labels, gcfg, dcfg, tcfg, progress)
    ckpt_io.save(res.final, args.out)
    print(f"wrote {args.out} (iteration {res.final.iteration}, collapsed={res.collapsed})")
    return 0


def cmd_train_probe(args) -> int:
    from .eval.probe import save_probe, train_probe

    grids, labels = _load_grid_dir(Path(args.data), args.size)
    probe = train_probe(grids, labels, args.epochs, args.seed)
    save_probe(probe, args.out)
    print(f"train accuracy {probe.train_accuracy:.4f}, held-out accuracy {probe.heldout_accuracy:.4f}")
    return 0


def cmd_attack_sim(args) -> int:
    from .eval.attack import craft_perturbation
    from .eval.probe import load_probe
    from .signal import inject_perturbation, load_wav, save_wav

    x = load_wav(args.input)
    probe = load_probe(args.probe)
    crafted = craft_perturbation(x, probe, args.target, args.eps, _tfa(args), args.bound, args.steps)
    save_wav(inject_perturbation(x, crafted.perturbation), args.out)
    print(f"relative loudness {crafted.loudness_db_rel:.2f} dB, "
          f"PSD distortion {crafted.psd_distortion_db:.2f} dB")
    return 0


def cmd_defend(args) -> int:
    from .ccgan import checkpoint as ckpt_io
    from .defense import DefenseConfig, defend, trace_document
    from .signal import load_wav, save_wav

    gen = ckpt_io.load(args.ckpt).generator()
    auto = args.cls == "auto"
    try:
        class_id = None if auto else int(args.cls)
    except ValueError as exc:
        raise UsageError(f"--class must be an integer or 'auto', got {args.cls!r}") from exc
    cfg = DefenseConfig(k_max=args.k_max, restarts=args.restarts, seed=args.seed,
                        class_strategy="search-all-classes" if auto else "known")
    res = defend(load_wav(args.input), gen, class_id, _tfa(args), cfg)
    save_wav(res.output, args.out)
    if args.trace:
        Path(args.trace).write_text(trace_document(res))
    print(f"class {res.class_used}, k_used {res.k_used}, final loss {res.final_loss:.6f}, "
          f"converged={res.converged}")
    return 0


def cmd_eval(args) -> int:
    from .eval.experiment import ExperimentConfig, run_experiment

    report = run_experiment(ExperimentConfig.load(args.config), _tfa(args))
    print(report.table())
    return 0


def cmd_qz(args) -> int:
    from .pencil import Pencil, qz_decompose

    a, b = _read_matrix(args.a), _read_matrix(args.b)
    ge = qz_decompose(Pencil(a, b), backend=args.backend)
    np.set_printoptions(precision=10, linewidth=120)
    print("alpha:", ge.alpha)
    print("beta:", ge.beta)
    print("eigenvalues:", ge.eigenvalues)
    q, z = ge.q, ge.z
    print(f"residual A: {np.linalg.norm(q.T @ a @ z - ge.s):.3e}")
    print(f"residual B: {np.linalg.norm(q.T @ b @ z - ge.t):.3e}")
    print(f"orthogonality Q: {np.linalg.norm(q.T @ q - np.eye(len(q))):.3e}")
    print(f"orthogonality Z: {np.linalg.norm(z.T @ z - np.eye(len(z))):.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ccdgan", description="Wavelet-spectrogram GAN purification toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def tfa_flag(sp):
        sp.add_argument("--tfa-config", help="JSON file overriding transform settings")

    s = sub.add_parser("spec", help="waveform -> serialized spectrogram")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    tfa_flag(s)
    s.set_defaults(func=cmd_spec)

    s = sub.add_parser("train-gan", help="train the conditional GAN")
    s.add_argument("--data", required=True, help="directory of spectrogram files plus labels.tsv")
    s.add_argument("--preset", choices=("paper", "desk"), default="desk")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--iters", type=int, default=None)
    s.set_defaults(func=cmd_train_gan)

    s = sub.add_parser("train-probe", help="train the probe classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_probe)

    s = sub.add_parser("attack-sim", help="craft a gradient-sign perturbation against the probe")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--probe", required=True)
    s.add_argument("--target", type=int, required=True)
    s.add_argument("--eps", type=float, default=0.05)
    s.add_argument("--bound", type=float, default=-15.0, help="relative loudness bound in dB")
    s.add_argument("--steps", type=int, default=1)
    s.add_argument("--out", required=True)
    tfa_flag(s)
    s.set_defaults(func=cmd_attack_sim)

    s = sub.add_parser("defend", help="purify a waveform with a trained generator")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--class", dest="cls", default="auto")
    s.add_argument("--out", required=True)
    s.add_argument("--k-max", type=int, default=400)
    s.add_argument("--restarts", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trace")
    tfa_flag(s)
    s.set_defaults(func=cmd_defend)

    s = sub.add_parser("eval", help="run an experiment document")
    s.add_argument("--config", required=True)
    tfa_flag(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("qz", help="generalized Schur decomposition of a matrix pair")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--backend", choices=("native", "lapack"), default="native")
    s.set_defaults(func=cmd_qz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CCDGanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        stderr = getattr(exc, "stderr", "")
        if stderr:
            print(stderr, file=sys.stderr, end="" if stderr.endswith("\n") else "\n")
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
