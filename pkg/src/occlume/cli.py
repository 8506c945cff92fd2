"""Command-line surface: gen, sample, train, eval, noise, export-ply.

Config precedence is defaults < --config key=value file < explicit flags, and
every CSV written starts with a `#` header echoing the resolved settings and
seed (paths excluded so outputs are location-independent). Exit codes: 0
success, 1 runtime failure, 2 usage error.
"""

import argparse
import sys
from pathlib import Path

from occlume import geomesh, harness, pointmls, sampling
from occlume.geomesh import PointCloud, parse_pcb, write_pcb, write_ply
from occlume.occlusion import DatasetManifest, GenConfig, build_dataset, resolve_threads
from occlume.rng import derive_seed


def _read_kv(path) -> dict:
    kv = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line and "=" in line:
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()
    return kv


def _common_flags(parser):
    parser.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (or OCCLUME_THREADS)")


def _resolve(defaults: dict, file_kv: dict, flags: dict) -> dict:
    """defaults < config file < explicit flags."""
    out = dict(defaults)
    for key, value in file_kv.items():
        if key in out:
            out[key] = type(defaults[key])(value) if defaults[key] is not None else value
    for key, value in flags.items():
        if value is not None:
            out[key] = value
    return out


def _header(cmd: str, resolved: dict) -> str:
    body = " ".join(f"{k}={resolved[k]}" for k in sorted(resolved))
    return f"# occlume {cmd} {body}"


def _require_out(args) -> Path:
    if not args.out:
        raise SystemExit(2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    file_kv = _read_kv(args.config) if args.config else {}
    defaults = GenConfig()
    resolved = _resolve(
        {
            "density": defaults.density, "n_points": defaults.n_points,
            "min_pixels": defaults.min_pixels, "image_size": defaults.image_size,
            "focal": defaults.focal, "radius": defaults.radius, "seed": defaults.seed,
        },
        file_kv,
        {
            "density": args.density, "n_points": args.n_points,
            "min_pixels": args.min_pixels, "image_size": args.image_size,
            "focal": args.focal, "radius": args.radius, "seed": args.seed,
        },
    )
    if args.views != 20:
        print("only the 20-view rig is supported", file=sys.stderr)
        return 2
    if args.split != "cross-view":
        print("only the cross-view split is supported", file=sys.stderr)
        return 2
    cfg = GenConfig(**resolved)
    out = _require_out(args)
    manifest = build_dataset(args.meshes, out, cfg,
                             threads=resolve_threads(args.threads), resume=args.resume)
    by_split = {"train": 0, "test": 0}
    for row in manifest.rows:
        by_split[row.split] += 1
    print(f"wrote {len(manifest.rows)} samples "
          f"(train {by_split['train']}, test {by_split['test']}), "
          f"skipped {manifest.skipped} unprojectable pairs")
    print(f"manifest: {out / 'manifest.tsv'}")
    return 0


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------

def _load_model(ckpt_path) -> tuple[pointmls.ModelParams, pointmls.ModelSpec]:
    ckpt_path = Path(ckpt_path)
    spec_path = ckpt_path.with_suffix(".spec")
    if not spec_path.exists():
        raise FileNotFoundError(f"model spec sidecar missing: {spec_path}")
    spec = pointmls.ModelSpec.from_kv(spec_path.read_text(encoding="utf-8"))
    cfg = spec.build()
    params = pointmls.init_params(cfg, 0)
    params.load(ckpt_path)
    return params, spec


def cmd_sample(args) -> int:
    seed = args.seed if args.seed is not None else 0
    cloud = parse_pcb(Path(args.input).read_bytes())
    n = len(cloud)
    if args.m > n:
        print(f"cannot sample {args.m} from {n} points", file=sys.stderr)
        return 1
    if args.method == "rs":
        sel = sampling.random_sample(cloud, args.m, derive_seed(seed, "cli-rs"))
        picked = PointCloud(cloud.points[sel.indices])
    elif args.method == "fps":
        sel = sampling.farthest_point_sample(cloud, args.m)
        picked = PointCloud(cloud.points[sel.indices])
    else:
        if not args.ckpt:
            print("cps sampling needs --ckpt", file=sys.stderr)
            return 2
        params, spec = _load_model(args.ckpt)
        cfg = spec.build()
        matches = [s for s, m in enumerate(cfg.levels) if m == args.m]
        if not matches:
            print(f"checkpoint has no level of size {args.m} "
                  f"(levels: {list(cfg.levels)})", file=sys.stderr)
            return 1
        level = matches[0]
        cfg.set_tau(harness.TAU_END)
        sampled, _ = pointmls.cps_forward(cloud.points, params, cfg.cps[level],
                                          "hard", derive_seed(seed, "cli-cps"),
                                          prefix=f"level{level}.cps")
        picked = PointCloud(sampled.data)
    out = _require_out(args)
    stem = Path(args.input).stem
    target = out / f"{stem}_{args.method}{args.m}.pcb"
    target.write_bytes(write_pcb(picked))
    if args.ply:
        target.with_suffix(".ply").write_text(write_ply(picked), encoding="utf-8")
    cd = sampling.chamfer_distance(picked, cloud)
    print(f"wrote {target}")
    print(f"chamfer_to_input={cd!r}")
    return 0


# ---------------------------------------------------------------------------
# train / eval / noise
# ---------------------------------------------------------------------------

def _model_flags(parser):
    parser.add_argument("--levels", default=None, help="comma list, e.g. 1024,512,256,128")
    parser.add_argument("--sampler", choices=pointmls.SAMPLERS, default=None)
    parser.add_argument("--k", type=int, default=None, help="neighborhood size")
    parser.add_argument("--stages", type=int, default=None, help="aggregation stages")
    parser.add_argument("--embed-top", type=int, default=None)
    parser.add_argument("--embed-sub", type=int, default=None)
    parser.add_argument("--no-norm", action="store_true")
    parser.add_argument("--no-spl", action="store_true",
                        help="drop the sampling (Chamfer) loss term")
    parser.add_argument("--spl-weight", type=float, default=None)


def _build_spec(args, manifest: DatasetManifest, file_kv: dict) -> pointmls.ModelSpec:
    n_points = manifest.rows[0].count
    class_names = tuple(manifest.catalog().names)
    defaults = {
        "levels": ",".join(str(n_points // (2 ** i)) for i in range(4)),
        "sampler": "cps", "k": 24, "stages": 4,
        "embed_top": 64, "embed_sub": 32,
        "use_norm": 1, "spl_enabled": 1, "spl_weight": 1.0,
    }
    resolved = _resolve(defaults, file_kv, {
        "levels": args.levels, "sampler": args.sampler, "k": args.k,
        "stages": args.stages, "embed_top": args.embed_top,
        "embed_sub": args.embed_sub,
        "use_norm": 0 if args.no_norm else None,
        "spl_enabled": 0 if args.no_spl else None,
        "spl_weight": args.spl_weight,
    })
    return pointmls.ModelSpec(
        n_points=n_points, class_names=class_names,
        levels=tuple(int(x) for x in str(resolved["levels"]).split(",")),
        k=int(resolved["k"]), stages=int(resolved["stages"]),
        sampler=resolved["sampler"], use_norm=bool(int(resolved["use_norm"])),
        embed_top=int(resolved["embed_top"]), embed_sub=int(resolved["embed_sub"]),
        spl_enabled=bool(int(resolved["spl_enabled"])),
        spl_weight=float(resolved["spl_weight"]),
    )


def _spec_summary(spec: pointmls.ModelSpec) -> dict:
    return {
        "levels": "/".join(str(m) for m in spec.levels), "sampler": spec.sampler,
        "k": spec.k, "stages": spec.stages, "classes": len(spec.class_names),
        "n_points": spec.n_points,
    }


def cmd_train(args) -> int:
    file_kv = _read_kv(args.config) if args.config else {}
    manifest_path = Path(args.manifest)
    manifest = DatasetManifest.read(manifest_path)
    spec = _build_spec(args, manifest, file_kv)
    cfg = spec.build()
    tdefaults = {"epochs": 65, "batch": 32, "lr": 0.1, "momentum": 0.9,
                 "tau_schedule": "cos", "seed": 0}
    tr = _resolve(tdefaults, file_kv, {
        "epochs": args.epochs, "batch": args.batch, "lr": args.lr,
        "momentum": args.momentum, "tau_schedule": args.tau_schedule,
        "seed": args.seed,
    })
    tcfg = harness.TrainConfig(epochs=int(tr["epochs"]), batch_size=int(tr["batch"]),
                               base_lr=float(tr["lr"]), momentum=float(tr["momentum"]),
                               tau_kind=str(tr["tau_schedule"]), seed=int(tr["seed"]))
    samples = harness.load_samples(manifest, manifest_path.parent, split="train")
    out = _require_out(args)
    (out / "ckpt").mkdir(exist_ok=True)
    (out / "metrics").mkdir(exist_ok=True)

    def progress(log):
        if not args.quiet:
            print(f"epoch {log.epoch:3d} loss {log.loss:.4f} lr {log.lr:.4f} "
                  f"tau {log.tau:.3f} holdout_oa {log.holdout_oa:.3f}")

    params, logs = harness.train(tcfg, cfg, samples, progress=progress)
    params.save(out / "ckpt" / "model.mls1")
    (out / "ckpt" / "model.spec").write_text(spec.to_kv(), encoding="utf-8")
    header = _header("train", {**tr, **_spec_summary(spec)})
    harness.write_train_log(out / "metrics" / "train_log.csv", logs, header[2:])
    print(f"checkpoint: {out / 'ckpt' / 'model.mls1'}")
    print(f"log: {out / 'metrics' / 'train_log.csv'}")
    if logs:
        print(f"final holdout_oa={logs[-1].holdout_oa!r}")
    return 0


def _eval_setup(args):
    manifest_path = Path(args.manifest)
    manifest = DatasetManifest.read(manifest_path)
    file_kv = _read_kv(args.config) if args.config else {}
    if args.ckpt:
        params, spec = _load_model(args.ckpt)
    else:
        spec = _build_spec(args, manifest, file_kv)
        params = pointmls.init_params(spec.build(),
                                      derive_seed(args.seed or 0, "fresh"))
    cfg = spec.build()
    cfg.set_tau(harness.TAU_END)
    catalog = geomesh.ClassCatalog(list(spec.class_names))
    samples = harness.load_samples(manifest, manifest_path.parent,
                                   split=args.split, catalog=catalog)
    return params, spec, cfg, samples


def cmd_eval(args) -> int:
    params, spec, cfg, samples = _eval_setup(args)
    seed = args.seed if args.seed is not None else 0
    scale = tuple(float(x) for x in args.scale_range.split(","))
    metrics = harness.evaluate(params, cfg, samples, voting=args.voting,
                               scale_range=scale, seed=seed,
                               threads=resolve_threads(args.threads))
    out = _require_out(args)
    (out / "metrics").mkdir(exist_ok=True)
    resolved = {"split": args.split, "voting": args.voting,
                "scale": args.scale_range, "seed": seed, **_spec_summary(spec)}
    lines = [_header("eval", resolved)] + metrics.csv_lines(list(spec.class_names))
    target = out / "metrics" / f"eval_{args.split}.csv"
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"oa={metrics.oa!r} macc={metrics.macc!r}")
    print(f"metrics: {target}")
    return 0


def cmd_noise(args) -> int:
    params, spec, cfg, samples = _eval_setup(args)
    seed = args.seed if args.seed is not None else 0
    etas = [float(x) for x in args.eta.split(",")]
    rows = harness.robustness_sweep(params, cfg, samples, etas,
                                    voting=args.voting, seed=seed,
                                    dist=args.dist, sigma=args.sigma,
                                    half_width=args.half_width,
                                    threads=resolve_threads(args.threads))
    out = _require_out(args)
    (out / "metrics").mkdir(exist_ok=True)
    resolved = {"split": args.split, "etas": args.eta, "dist": args.dist,
                "sigma": args.sigma, "half_width": args.half_width,
                "voting": args.voting, "seed": seed, **_spec_summary(spec)}
    lines = [_header("noise", resolved), "eta,oa,macc"]
    for eta, metrics in rows:
        lines.append(f"{eta!r},{metrics.oa!r},{metrics.macc!r}")
        print(f"eta={eta} oa={metrics.oa!r} macc={metrics.macc!r}")
    target = out / "metrics" / "noise.csv"
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"metrics: {target}")
    return 0


def cmd_export_ply(args) -> int:
    cloud = parse_pcb(Path(args.input).read_bytes())
    target = Path(args.out_ply) if args.out_ply else Path(args.input).with_suffix(".ply")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(write_ply(cloud), encoding="utf-8")
    print(f"wrote {target} ({len(cloud)} vertices)")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occlume",
                                     description="Occluded point cloud synthesis "
                                                 "and classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthesize an occluded dataset from meshes")
    p.add_argument("--meshes", required=True, help="mesh root (class/split/*.off)")
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--split", default="cross-view")
    p.add_argument("--density", type=int, default=None)
    p.add_argument("--n-points", type=int, default=None)
    p.add_argument("--min-pixels", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--focal", type=float, default=None)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--resume", action="store_true")
    _common_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("sample", help="subsample a cloud with rs, fps, or cps")
    p.add_argument("--in", dest="input", required=True, help="input PCB1 file")
    p.add_argument("--method", choices=("rs", "fps", "cps"), required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--ckpt", default=None, help="checkpoint (cps only)")
    p.add_argument("--ply", action="store_true", help="also write a PLY")
    _common_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train a classifier on a generated manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--tau-schedule", choices=harness.SCHEDULE_KINDS, default=None)
    p.add_argument("--quiet", action="store_true")
    _model_flags(p)
    _common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or a fresh model)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--voting", type=int, default=1)
    p.add_argument("--scale-range", default="0.8,1.25")
    _model_flags(p)
    _common_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("noise", help="robustness sweep over replace-ratio noise")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--eta", required=True, help="comma list of replace fractions")
    p.add_argument("--dist", choices=("normal", "uniform"), default="normal")
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--half-width", type=float, default=1.0,
                   help="cube half-width for uniform noise")
    p.add_argument("--voting", type=int, default=1)
    _model_flags(p)
    _common_flags(p)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("export-ply", help="convert a PCB1 cloud to ASCII PLY")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-ply", default=None)
    _common_flags(p)
    p.set_defaults(func=cmd_export_ply)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as exc:
        raise exc
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
