"""Command-line entry points.

Exit codes: 0 success, 1 invalid config/geometry/format, 2 unreadable or
missing data, 3 training diverged (non-finite loss), 4 gradient check
failure.  Heavy imports happen inside the commands so the DSMM_THREADS
cap can be applied to the BLAS thread pools before numpy loads.
"""

import argparse
import datetime
import json
import os
import sys

_INT_KEYS = ("block_size", "patch_size", "batch_size", "epochs",
             "iters_per_epoch", "seed", "lr_phase1_end", "lr_phase2_end")
_FLOAT_KEYS = ("alpha", "sampling_ratio", "momentum", "weight_decay",
               "weight_decay_sampling", "scale_min", "scale_max",
               "hflip_prob", "lr_phase1_rate", "lr_phase2_start_rate",
               "lr_phase2_end_rate", "lr_phase3_rate")
_BOOL_KEYS = ("augment", "per_pixel_loss", "residual")
_STR_KEYS = ("lr_interpolation",)


def _apply_thread_cap():
    cap = os.environ.get("DSMM_THREADS", "")
    if not cap:
        return
    try:
        n = int(cap)
    except ValueError:
        print(f"warning: ignoring non-integer DSMM_THREADS={cap!r}",
              file=sys.stderr)
        return
    if n > 0:  # 0 means auto: leave library defaults alone
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def parse_config_file(path):
    """Key = value lines, # comments; returns raw string values."""
    from .errors import ConfigError
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}",
                              f"expected 'key = value', got {line!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def build_train_config(values, seed_override=None):
    from .errors import ConfigError
    from .training import LrSchedule, TrainConfig

    def convert(key, val):
        try:
            if key in _INT_KEYS:
                return int(val)
            if key in _FLOAT_KEYS:
                return float(val)
            if key in _BOOL_KEYS:
                low = val.lower()
                if low in ("true", "yes", "1"):
                    return True
                if low in ("false", "no", "0"):
                    return False
                raise ValueError(f"not a boolean: {val!r}")
            return val
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from None

    known = set(_INT_KEYS) | set(_FLOAT_KEYS) | set(_BOOL_KEYS) | set(_STR_KEYS)
    typed = {}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(key, "unknown config key")
        typed[key] = convert(key, val)
    if "alpha" not in typed:
        raise ConfigError("alpha", "required key is missing")

    sched_kwargs = {}
    for src, dst in (("lr_phase1_end", "phase1_end"),
                     ("lr_phase2_end", "phase2_end"),
                     ("lr_phase1_rate", "phase1_rate"),
                     ("lr_phase2_start_rate", "phase2_start_rate"),
                     ("lr_phase2_end_rate", "phase2_end_rate"),
                     ("lr_phase3_rate", "phase3_rate"),
                     ("lr_interpolation", "interpolation")):
        if src in typed:
            sched_kwargs[dst] = typed.pop(src)

    scale_min = typed.pop("scale_min", 0.8)
    scale_max = typed.pop("scale_max", 1.2)
    if seed_override is not None:
        typed["seed"] = seed_override
    return TrainConfig(lr_schedule=LrSchedule(**sched_kwargs),
                       scale_range=(scale_min, scale_max), **typed)


def _log_line(log_path, message):
    stamp = datetime.datetime.now().isoformat(timespec="seconds")
    with open(log_path, "a") as fh:
        fh.write(f"{stamp} {message}\n")


def cmd_train(args):
    from .checkpoint import save_checkpoint
    from .errors import ConfigError, FormatError, TrainingDiverged
    from .matrix_io import write_matrix
    from .sampling import constrained_matrix
    from .training import PatchDataset, train, write_loss_csv

    try:
        cfg = build_train_config(parse_config_file(args.config),
                                 seed_override=args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    from .image_io import load_directory
    try:
        images, _ = load_directory(args.data)
    except (FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "run.log")
    _log_line(log_path, f"train start: config={args.config} data={args.data} "
                        f"seed={cfg.seed}")
    try:
        dataset = PatchDataset(images, cfg.patch_size, cfg.seed,
                               scale_range=cfg.scale_range,
                               hflip_prob=cfg.hflip_prob,
                               augment=cfg.augment)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        sampling, recon, history = train(dataset, cfg,
                                         checkpoint_dir=args.out)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        _log_line(log_path, f"train aborted: {exc}")
        return 3
    save_checkpoint(os.path.join(args.out, "final.dsmn"), sampling, recon,
                    epoch=cfg.epochs)
    write_matrix(os.path.join(args.out, "matrix.dsmm"),
                 constrained_matrix(sampling))
    write_loss_csv(os.path.join(args.out, "loss.csv"), history)
    _log_line(log_path, f"train done: {len(history)} iterations")
    print(f"wrote {args.out}/final.dsmn, matrix.dsmm, loss.csv")
    return 0


def cmd_sample(args):
    import numpy as np
    from .errors import FormatError, ValidationError
    from .evaluation import blockify
    from .image_io import load_image
    from .matrix_io import read_matrix
    from .sampling import sample_image

    try:
        phi = read_matrix(args.matrix)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        image = load_image(args.image)
    except (FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    padded, dims = blockify(image, phi.block_size, mode="replicate")
    try:
        meas = sample_image(padded.reshape(1, 1, *padded.shape), phi,
                            noise_sigma=args.noise, rng_seed=args.seed)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    tmp = args.out + ".tmp"
    with open(tmp, "wb") as fh:
        np.save(fh, meas)
    os.replace(tmp, args.out)
    sidecar = {
        "n_b": phi.n_b, "block_size": phi.block_size,
        "blocks_h": int(meas.shape[2]), "blocks_w": int(meas.shape[3]),
        "original_h": dims[0], "original_w": dims[1],
        "noise_sigma": args.noise, "seed": args.seed,
        "matrix_file": os.path.basename(args.matrix),
    }
    side_path = os.path.splitext(args.out)[0] + ".json"
    tmp = side_path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, side_path)
    print(f"wrote {args.out} and {side_path}")
    return 0


def cmd_reconstruct(args):
    import numpy as np
    from .errors import ConfigError, FormatError
    from .evaluation import unblockify
    from .image_io import save_image
    from .matrix_io import read_matrix
    from .solver import SolverConfig, reconstruct_image

    try:
        phi = read_matrix(args.matrix)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        meas = np.load(args.measurements)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = SolverConfig(lam=args.lam, max_iters=args.max_iters,
                           accelerated=not args.plain)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    recon = reconstruct_image(meas, phi, cfg)
    image = np.clip(recon[0, 0], 0.0, 1.0)
    side_path = os.path.splitext(args.measurements)[0] + ".json"
    if os.path.exists(side_path):
        with open(side_path) as fh:
            dims = json.load(fh)
        image = unblockify(image, (dims["original_h"], dims["original_w"]))
    save_image(args.out, image)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args):
    import numpy as np
    from .errors import FormatError, MatrixMismatch, ValidationError
    from .evaluation import run_comparison, write_report_csv, write_summary_csv
    from .image_io import load_directory, save_image
    from .matrix_io import read_matrix
    from .solver import SolverConfig, reconstruct_image

    if len(args.matrix) != len(args.ratio):
        print("error: need one --ratio per --matrix", file=sys.stderr)
        return 1
    try:
        images, paths = load_directory(args.images)
    except (FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    matrices = []
    for path in args.matrix:
        try:
            matrices.append(read_matrix(path))
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        except FormatError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1

    solver_cfg = SolverConfig(lam=args.lam)
    reconstructors = {}
    if args.solver == "ista":
        reconstructors["ista"] = (
            lambda meas, phi: reconstruct_image(meas, phi, solver_cfg))
    else:
        from .checkpoint import load_checkpoint
        from .reconstruction import forward
        from .sampling import constrained_matrix
        if not args.checkpoint:
            print("error: --solver learned requires --checkpoint",
                  file=sys.stderr)
            return 1
        try:
            sampling, recon, _ = load_checkpoint(args.checkpoint)
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        except FormatError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        trained = constrained_matrix(sampling)

        def learned(meas, phi, _trained=trained, _recon=recon):
            if not np.array_equal(phi.entries, _trained.entries):
                raise MatrixMismatch(
                    "matrix does not match the checkpoint's trained matrix")
            return forward(meas, _recon).out

        reconstructors["learned"] = learned

    names = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    try:
        report = run_comparison(images, matrices, args.ratio, reconstructors,
                                image_names=names,
                                config_echo={"solver": args.solver,
                                             "lam": args.lam})
    except (MatrixMismatch, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_report_csv(args.out, report)
    base, _ = os.path.splitext(args.out)
    write_summary_csv(base + "_summary.csv", report)

    out_dir = os.path.dirname(os.path.abspath(args.out))
    if args.save_images:
        from .evaluation import blockify, unblockify
        from .sampling import sample_image
        for img_name, img in zip(names, images):
            for m_idx, (phi, ratio) in enumerate(zip(matrices, args.ratio)):
                padded, dims = blockify(img, phi.block_size)
                meas = sample_image(padded.reshape(1, 1, *padded.shape), phi)
                for rec_name, rec in reconstructors.items():
                    result = np.clip(unblockify(rec(meas, phi)[0, 0], dims),
                                     0.0, 1.0)
                    out_name = f"{img_name}_{phi.provenance}{m_idx}_{rec_name}.png"
                    save_image(os.path.join(out_dir, out_name), result)
    print(f"wrote {args.out} and {base}_summary.csv")
    return 0


def cmd_export_matrix(args):
    from .errors import FormatError
    from .matrix_io import read_matrix, write_sparse_text

    try:
        phi = read_matrix(args.matrix)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_sparse_text(args.out, phi)
    print(f"wrote {args.out}")
    return 0


def cmd_import_matrix(args):
    from .errors import FormatError, ValidationError
    from .matrix_io import read_matrix, read_sparse_text, write_matrix

    try:
        with open(args.input, "rb") as fh:
            head = fh.read(4)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if head == b"DSMM":
            phi = read_matrix(args.input)
        else:
            phi = read_sparse_text(args.input)
    except (FormatError, ValidationError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_matrix(args.out, phi)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import DEFAULT_TOL, run_gradcheck

    seeds = args.seed if args.seed else [0, 1]
    worst = ("", 0.0)
    ok = True
    for seed in seeds:
        errors, passed = run_gradcheck(seed)
        ok = ok and passed
        for group, err in errors.items():
            print(f"seed {seed} {group:10s} max rel err {err:.3e}")
            if err > worst[1]:
                worst = (f"{group} (seed {seed})", err)
    if not ok:
        print(f"FAIL: worst offender {worst[0]} rel err {worst[1]:.3e} "
              f">= {DEFAULT_TOL}", file=sys.stderr)
        return 4
    print(f"OK: all groups below {DEFAULT_TOL}")
    return 0


def cmd_gen_grm(args):
    from .errors import ValidationError
    from .evaluation import generate_grm
    from .matrix_io import write_matrix
    from .sampling import measurement_dim

    try:
        if args.n_b is not None:
            n_b = args.n_b
        else:
            if args.ratio is None:
                print("error: need --n-b or --ratio", file=sys.stderr)
                return 1
            n_b = measurement_dim(args.ratio, args.block)
        phi = generate_grm(n_b, args.block * args.block, args.seed)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_matrix(args.out, phi)
    print(f"wrote {args.out} ({phi.n_b}x{phi.n_B}, block {phi.block_size})")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="dsmm",
        description="Learned sparse block-sampling matrices: train, "
                    "sample, reconstruct, and compare against a Gaussian "
                    "baseline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train sampling matrix + network")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="measure one image with a matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("reconstruct", help="solve measurements back to an image")
    p.add_argument("--matrix", required=True)
    p.add_argument("--measurements", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lam", type=float, default=0.01)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--plain", action="store_true",
                   help="disable acceleration")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="compare matrices on an image set")
    p.add_argument("--images", required=True)
    p.add_argument("--matrix", action="append", required=True)
    p.add_argument("--ratio", action="append", type=float, required=True)
    p.add_argument("--solver", choices=("ista", "learned"), default="ista")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--lam", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.add_argument("--save-images", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-matrix", help="binary matrix to sparse text")
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_matrix)

    p = sub.add_parser("import-matrix",
                       help="sparse text or binary matrix to binary")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_matrix)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, action="append", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-grm", help="write a Gaussian baseline matrix")
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--n-b", type=int, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_grm)
    return parser


def main(argv=None):
    _apply_thread_cap()
    args = _build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
