"""Command-line pipelines: preprocess, embed, train, evaluate, report."""

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__, data, semantic
from .evaluation import BASELINES, apply_variant, evaluate_model, metrics_table
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit

DATASET_FILES = ("train.jsonl", "test.jsonl", "catalog.json", "stats.json")


def _sha256_bytes(blob):
    return hashlib.sha256(blob).hexdigest()


def _config_hash(cfg_dict):
    return _sha256_bytes(json.dumps(cfg_dict, sort_keys=True).encode("utf-8"))


def _dataset_hash(dataset_dir):
    h = hashlib.sha256()
    for name in DATASET_FILES:
        path = Path(dataset_dir) / name
        if path.exists():
            h.update(name.encode("utf-8"))
            h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir, command, seed=None, config=None, dataset_dir=None, outputs=()):
    """Every artifact directory gets exactly one manifest tracing it back to
    its configuration and input data."""
    manifest = {
        "command": command,
        "code_version": __version__,
        "seed": seed,
        "config_hash": _config_hash(config) if config is not None else None,
        "config": config,
        "dataset_hash": _dataset_hash(dataset_dir) if dataset_dir else None,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "outputs": [str(p) for p in outputs],
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest


def verify_manifest(artifact_dir, dataset_dir=None):
    """Recompute the hashes recorded in an artifact's manifest; a mismatch
    means the artifact no longer corresponds to its recorded inputs."""
    path = Path(artifact_dir) / "run_manifest.json"
    if not path.exists():
        return None
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("config") is not None:
        if _config_hash(manifest["config"]) != manifest.get("config_hash"):
            raise ValueError(f"{path}: config hash mismatch; manifest was tampered with or corrupted")
    if dataset_dir is not None and manifest.get("dataset_hash") is not None:
        if _dataset_hash(dataset_dir) != manifest["dataset_hash"]:
            raise ValueError(
                f"{path}: dataset hash mismatch; {dataset_dir} is not the dataset this run used")
    return manifest


def load_config_file(path):
    """Read a TOML or JSON config with optional [model] and [train] sections."""
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    else:
        raw = json.loads(path.read_text(encoding="utf-8"))
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    return raw


def build_configs(config_path=None, seed=None, ablate=None):
    raw = load_config_file(config_path) if config_path else {}
    try:
        model_cfg = ModelConfig(**raw.get("model", {}))
        train_cfg = TrainConfig(**raw.get("train", {}))
    except TypeError as exc:
        raise ValueError(f"bad config key: {exc}") from exc
    if seed is not None:
        train_cfg.seed = seed
    variant = None
    if ablate:
        model_cfg, train_cfg, variant = apply_variant(model_cfg, train_cfg, ablate)
    return model_cfg, train_cfg, variant


def _parse_fraction(text):
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def split_validation(train_examples, fraction=0.1):
    """Hold out the final `fraction` of training sessions (whole sessions,
    by order of appearance) for early stopping."""
    keys = []
    seen = set()
    for s in train_examples:
        if s.session_key not in seen:
            seen.add(s.session_key)
            keys.append(s.session_key)
    n_valid = max(1, int(round(len(keys) * fraction)))
    valid_keys = set(keys[-n_valid:])
    train = [s for s in train_examples if s.session_key not in valid_keys]
    valid = [s for s in train_examples if s.session_key in valid_keys]
    if not train:  # tiny corpora: keep at least one training session
        train, valid = valid, valid
    return train, valid


# --- subcommands ---------------------------------------------------------------

def cmd_preprocess(args):
    sessions = data.load_sessions(args.raw, args.format)
    if args.max_gap is not None:
        sessions = data.split_amazon_sessions(sessions, args.max_gap)
    test_window = args.test_days * 86400 if args.test_days is not None else None
    if test_window is None and args.test_fraction is None:
        defaults = {"diginetica": 7 * 86400, "yoochoose": 86400}
        test_window = defaults.get(args.format)
    train, test, catalog, stats = data.build_dataset(
        sessions,
        min_len=args.min_len,
        min_item_freq=args.min_item_freq,
        test_fraction=args.test_fraction if args.test_fraction is not None else 0.1,
        test_window=test_window,
        recent_fraction=_parse_fraction(args.recent_fraction) if args.recent_fraction else None,
    )
    if args.metadata:
        data.load_metadata(args.metadata, catalog)
    data.save_dataset(args.out, train, test, catalog, stats)
    write_manifest(
        args.out, "preprocess",
        config={
            "format": args.format, "min_len": args.min_len, "min_item_freq": args.min_item_freq,
            "test_fraction": args.test_fraction, "test_days": args.test_days,
            "recent_fraction": args.recent_fraction, "max_gap": args.max_gap,
        },
        dataset_dir=args.out,
        outputs=[Path(args.out) / f for f in DATASET_FILES],
    )
    print(f"items={stats.items} clicks={stats.clicks} train={stats.train_count} "
          f"test={stats.test_count} avg_len={stats.avg_len:.2f}")
    if args.expect_stats:
        expected = json.loads(Path(args.expect_stats).read_text(encoding="utf-8"))
        failures = []
        for key in ("items", "clicks", "train_count", "test_count"):
            if key in expected and expected[key] != getattr(stats, key):
                failures.append(f"{key}: expected {expected[key]}, got {getattr(stats, key)}")
        if "avg_len" in expected and abs(expected["avg_len"] - stats.avg_len) > 0.01:
            failures.append(f"avg_len: expected {expected['avg_len']}, got {stats.avg_len:.4f}")
        if failures:
            print("expected-stats mismatch:\n  " + "\n  ".join(failures), file=sys.stderr)
            return 1
        print("expected stats matched")
    return 0


def _make_provider(args):
    if args.provider == "mock":
        return semantic.MockEmbeddingProvider(dim_raw=args.dim_raw, seed=args.seed)
    if args.provider == "http":
        if not args.api_url or not args.api_model:
            raise ValueError("--api-url and --api-model are required for the http provider")
        return semantic.HttpEmbeddingProvider(
            url=args.api_url, model=args.api_model, dim_raw=args.dim_raw,
            api_key_env=args.api_key_env,
        )
    raise ValueError(f"unknown provider {args.provider!r}")


def cmd_embed(args):
    _, _, catalog, _ = data.load_dataset(args.dataset)
    provider = _make_provider(args)
    table = semantic.build_semantic_table(catalog, provider, cache_path=args.cache)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "semantic_table.npz"
    semantic.save_semantic_table(table, out_path)
    write_manifest(
        out_dir, "embed", seed=args.seed,
        config={"provider": provider.name, "dim_raw": args.dim_raw, "cache": args.cache},
        dataset_dir=args.dataset, outputs=[out_path],
    )
    print(f"embedded {int(table.present.sum())}/{len(table.present)} items "
          f"(provider calls: {provider.calls})")
    return 0


def cmd_train(args):
    if args.device == "auto":
        import torch

        if not torch.cuda.is_available():
            print("no accelerator available; falling back to CPU", file=sys.stderr)
    train_examples, _, catalog, _ = data.load_dataset(args.dataset)
    model_cfg, train_cfg, variant = build_configs(args.config, seed=args.seed, ablate=args.ablate)
    sem = None
    if args.semantic:
        sem = semantic.load_semantic_table(args.semantic)
        if variant != "w/o Semantic":
            model_cfg.use_semantic = True
    if model_cfg.use_semantic and sem is None:
        raise ValueError("model config enables the semantic table but --semantic was not given")
    train_part, valid_part = split_validation(train_examples, fraction=args.valid_fraction)

    def log_epoch(rec):
        print(f"epoch {rec['epoch']:3d}  loss {rec['loss']:.4f}  "
              f"valid HR@20 {rec['valid_hr']:.2f}  MRR@20 {rec['valid_mrr']:.2f}")

    model, history = fit(train_part, valid_part, catalog.n, model_cfg, train_cfg,
                         semantic=sem, on_epoch_end=log_epoch)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "history.jsonl", "w", encoding="utf-8") as f:
        for rec in history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    save_checkpoint(model, out_dir / "checkpoint")
    write_manifest(
        out_dir, "train", seed=train_cfg.seed,
        config={"model": asdict(model_cfg), "train": asdict(train_cfg), "ablation": variant},
        dataset_dir=args.dataset,
        outputs=[out_dir / "history.jsonl", out_dir / "checkpoint"],
    )
    print(f"trained {len(history)} epochs; best valid HR@20 "
          f"{max(rec['valid_hr'] for rec in history):.2f}")
    return 0


def cmd_evaluate(args):
    model, _ = load_checkpoint(Path(args.checkpoint))
    verify_manifest(Path(args.checkpoint).parent)  # integrity of the training run, if present
    train_examples, test_examples, catalog, _ = data.load_dataset(args.dataset)
    metrics, ranks = evaluate_model(model, test_examples, batch_size=args.batch_size,
                                    k=args.k, return_ranks=True)
    rows = [("hiphop", metrics)]
    if args.baselines:
        for name in args.baselines.split(","):
            name = name.strip().lower()
            if name not in BASELINES:
                raise ValueError(f"unknown baseline {name!r}; expected one of {sorted(BASELINES)}")
            rows.append((name, BASELINES[name](train_examples, test_examples, catalog.n, k=args.k)))
    csv_text = metrics_table(rows, fmt="csv")
    print(metrics_table(rows, fmt="markdown"), end="")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(csv_text, encoding="utf-8")
    if args.dump_ranks:
        path = Path(args.dump_ranks)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for s, rank in zip(test_examples, ranks):
                f.write(json.dumps({"session_key": s.session_key, "target": s.target,
                                    "rank": rank}) + "\n")
    return 0


def cmd_report(args):
    if not args.histories:
        raise ValueError("no history files given")
    runs = []
    for path in args.histories:
        rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
        if not rows:
            raise ValueError(f"{path}: empty history")
        runs.append((Path(path).parent.name or Path(path).stem, rows))
    header = "| run | epochs | best HR@20 | best MRR@20 | final loss |"
    lines = [header, "|-----|-------:|-----------:|------------:|-----------:|"]
    csv_lines = ["run,epochs,best_hr,best_mrr,final_loss"]
    for name, rows in runs:
        best_hr = max(r["valid_hr"] for r in rows)
        best_mrr = max(r["valid_mrr"] for r in rows)
        lines.append(f"| {name} | {len(rows)} | {best_hr:.2f} | {best_mrr:.2f} | {rows[-1]['loss']:.4f} |")
        csv_lines.append(f"{name},{len(rows)},{best_hr:.4f},{best_mrr:.4f},{rows[-1]['loss']:.6f}")
    table = "\n".join(lines) + "\n"
    print(table, end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.md").write_text(table, encoding="utf-8")
        (out_dir / "report.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
        if args.plot:
            _plot_histories(runs, out_dir)
    elif args.plot:
        raise ValueError("--plot requires --out")
    return 0


def _plot_histories(runs, out_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for metric, fname in (("loss", "loss.png"), ("valid_hr", "valid_hr.png")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, rows in runs:
            ax.plot([r["epoch"] for r in rows], [r[metric] for r in rows], label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / fname, dpi=120)
        plt.close(fig)


def build_parser():
    parser = argparse.ArgumentParser(prog="hiphop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw interactions -> dataset artifact")
    p.add_argument("raw", help="raw input file")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--format", required=True, choices=data.KNOWN_FORMATS)
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--min-item-freq", type=int, default=5)
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--test-days", type=float, default=None)
    p.add_argument("--recent-fraction", default=None, help="keep only this recent train fraction, e.g. 1/64")
    p.add_argument("--max-gap", type=int, default=None, help="split user streams at gaps over this many seconds")
    p.add_argument("--metadata", default=None, help="item metadata JSONL")
    p.add_argument("--expect-stats", default=None, help="JSON file with expected dataset statistics")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("embed", help="dataset -> semantic embedding table")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--provider", default="mock", choices=("mock", "http"))
    p.add_argument("--cache", default=None, help="embedding cache file")
    p.add_argument("--dim-raw", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--api-url", default=None)
    p.add_argument("--api-model", default=None)
    p.add_argument("--api-key-env", default="EMBEDDING_API_KEY")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="dataset -> checkpoint + history")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="TOML or JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablate", default=None, help="ablation variant, e.g. w/o-Contrastive")
    p.add_argument("--semantic", default=None, help="semantic_table.npz from the embed step")
    p.add_argument("--valid-fraction", type=float, default=0.1)
    p.add_argument("--device", default="cpu", choices=("cpu", "auto"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="checkpoint + dataset -> metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--baselines", default=None, help="comma list: pop,s-pop,item-knn")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--out", default=None, help="CSV output path")
    p.add_argument("--dump-ranks", default=None, help="write per-example ranks as JSONL")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="history files -> summary table / plots")
    p.add_argument("histories", nargs="*")
    p.add_argument("--out", default=None)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
