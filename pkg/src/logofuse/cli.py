"""``logofuse`` command line: synth, caption, train, embed, eval, ablate."""

from __future__ import annotations

import argparse
import copy
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .captioner import CaptionSource, precompute_captions
from .data import (PROMPT_TYPES, Captions, Manifest, SyntheticSpec, generate_synthetic, load_captions,
                   load_manifest, write_captions, write_embeddings, write_manifest)
from .errors import LogofuseError, ValidationError
from .metrics import evaluate
from .retrieval import build_gallery, embed_batch, query_topk, write_rankings
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_INVALID, EXIT_MISSING, EXIT_RUNTIME = 0, 1, 2, 3

TEXT_ROWS = [("w Brief", "brief"), ("w OCR+Brief", "ocr_brief"), ("w OCR+Detail", "ocr_detail"),
             ("w Detail", "detail"), ("w/o Text", "none")]
FUSION_ROWS = [("Cross Attn", "cross_attn"), ("MLP", "mlp"), ("Self Attn", "self_attn")]
TABLE_COLUMNS = [("Recall@5", "recall", "5"), ("NDCG@5", "ndcg", "5"), ("MAP@100", "map", "100")]

RUN_KEYS = ("manifest", "captions", "synthetic", "seeds")


class MissingInput(LogofuseError, FileNotFoundError):
    pass


@dataclass
class RunConfig:
    """Training config plus data paths; ``synthetic`` regenerates data per ablation seed."""

    train: TrainConfig = field(default_factory=TrainConfig)
    manifest: str | None = None
    captions: str | None = None
    synthetic: dict | None = None
    seeds: list[int] = field(default_factory=lambda: [0])

    def to_dict(self) -> dict:
        d = self.train.to_dict()
        d.update(manifest=self.manifest, captions=self.captions, synthetic=self.synthetic, seeds=list(self.seeds))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        run = {k: d.pop(k) for k in RUN_KEYS if k in d}
        cfg = cls(TrainConfig.from_dict(d), **{k: v for k, v in run.items() if k != "seeds"})
        if "seeds" in run:
            cfg.seeds = list(run["seeds"])
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.train.validate()
        if self.synthetic is not None:
            SyntheticSpec.from_dict(self.synthetic).validate()
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ValidationError("seeds must be a non-empty list of integers")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(d: dict, item: str) -> None:
    if "=" not in item:
        raise ValidationError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ValidationError(f"--set {key}: {p!r} is not a section")
        node = nxt
    node[parts[-1]] = _parse_value(raw)


def resolve_config(args) -> RunConfig:
    d: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInput(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
    for item in args.set or []:
        apply_override(d, item)
    if args.seed is not None:
        d["seed"] = args.seed
        if isinstance(d.get("synthetic"), dict):
            d["synthetic"]["seed"] = args.seed
    return RunConfig.from_dict(d)


def _run_dir(args) -> Path:
    if not args.run_dir:
        raise ValidationError("--run-dir is required: every output goes under an explicit run directory")
    p = Path(args.run_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _echo_config(run_dir: Path, command: str, payload: dict) -> None:
    doc = {"command": command, "version": __version__, "config": payload}
    (run_dir / f"{command}_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(path, what: str) -> Path:
    if path is None:
        raise ValidationError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{what} not found: {p}")
    return p


def _load_data(manifest_path, captions_path, need_captions: bool) -> tuple[Manifest, Captions | None]:
    mpath = _require(manifest_path, "manifest")
    manifest = load_manifest(mpath)
    if not need_captions:
        return manifest, None
    known = {r.id for r in manifest.records}
    if captions_path is not None:
        return manifest, Captions(load_captions(_require(captions_path, "captions file"), known))
    files = [mpath.parent / f for f in manifest.caption_files]
    if not files:
        raise ValidationError("text mode needs captions: give --captions or list caption_files in the manifest")
    records = []
    for f in files:
        records.extend(load_captions(_require(f, "caption file"), known))
    return manifest, Captions(records)


# --- Commands -------------------------------------------------------------


def cmd_synth(args) -> int:
    run_dir = _run_dir(args)
    cfg = resolve_config(args)
    d = dict(cfg.synthetic or {})
    flag_map = {"classes": "num_classes", "per_class": "samples_per_class", "visual_dim": "visual_dim",
                "noise": "visual_noise", "informativeness": "caption_informativeness"}
    for flag, key in flag_map.items():
        if getattr(args, flag) is not None:
            d[key] = getattr(args, flag)
    if args.confusable:
        d["confusable_pairs"] = [tuple(int(x) for x in p.split(":")) for p in args.confusable.split(",")]
    if args.seed is not None:
        d["seed"] = args.seed
    spec = SyntheticSpec.from_dict(d)
    manifest, captions = generate_synthetic(spec)
    write_manifest(run_dir / "manifest.jsonl", manifest)
    write_captions(run_dir / "captions.jsonl", captions)
    _echo_config(run_dir, "synth", spec.to_dict())
    print(f"wrote {len(manifest.records)} records and {len(captions)} captions to {run_dir}")
    return EXIT_OK


def cmd_caption(args) -> int:
    run_dir = _run_dir(args)
    manifest = load_manifest(_require(args.manifest, "manifest"))
    if args.source == "file":
        src = CaptionSource.file(_require(args.path, "caption file"))
    elif args.source == "mock":
        src = CaptionSource.mock(args.seed or 0)
    else:
        src = CaptionSource.http(args.endpoint, args.token_env, args.timeout, args.retries, args.concurrency)
    prompts = [p.strip() for p in args.prompts.split(",") if p.strip()]
    out = Path(args.out) if args.out else run_dir / "captions.jsonl"
    _echo_config(run_dir, "caption", {"manifest": args.manifest, "source": args.source, "path": args.path,
                                      "endpoint": args.endpoint, "prompts": prompts, "out": str(out)})
    result = precompute_captions(src, manifest, prompts, out)
    print(result.summary())
    return EXIT_OK if not result.failures else EXIT_RUNTIME


def cmd_train(args) -> int:
    run_dir = _run_dir(args)
    cfg = resolve_config(args)
    manifest, captions = _load_data(args.manifest or cfg.manifest, args.captions or cfg.captions,
                                    cfg.train.text_mode != "none")
    _echo_config(run_dir, "train", cfg.to_dict())
    with (run_dir / "train_log.jsonl").open("w", encoding="utf-8") as log:
        state = train(manifest, captions, cfg.train, log=log)
    ckpt = run_dir / "checkpoint.lgc"
    save_checkpoint(state, ckpt)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_embed(args) -> int:
    run_dir = _run_dir(args)
    state = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    manifest = load_manifest(_require(args.manifest, "manifest"))
    records = manifest.records if args.split == "all" else manifest.split(args.split)
    if not records:
        raise ValidationError(f"no records in split {args.split!r}")
    records = sorted(records, key=lambda r: r.id)
    out = Path(args.out) if args.out else run_dir / "embeddings.lgf"
    _echo_config(run_dir, "embed", {"checkpoint": args.checkpoint, "manifest": args.manifest,
                                    "split": args.split, "out": str(out), "topk": args.topk})
    write_embeddings(out, [r.id for r in records], embed_batch(records, state))
    print(f"embedded {len(records)} images to {out}")
    if args.topk:
        gallery = build_gallery(manifest.split("gallery"), state)
        queries = manifest.split("query")
        emb = embed_batch(queries, state)
        ranked = [query_topk(q, gallery, args.topk, r.id, exclude=r.id) for r, q in zip(queries, emb)]
        write_rankings(run_dir / "rankings.jsonl", ranked)
        print(f"ranked {len(ranked)} queries to {run_dir / 'rankings.jsonl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = _run_dir(args)
    state = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    manifest = load_manifest(_require(args.manifest, "manifest"))
    _echo_config(run_dir, "eval", {"checkpoint": args.checkpoint, "manifest": args.manifest, "out": args.out})
    report = evaluate(manifest.split("query"), manifest.split("gallery"), state)
    text = report.dumps()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def run_variant(job: dict) -> dict:
    """Train and evaluate one ablation cell; isolated so it can run in a worker process."""
    cfg = TrainConfig.from_dict(job["train"])
    if job.get("synthetic") is not None:
        manifest, caps = generate_synthetic(SyntheticSpec.from_dict(job["synthetic"]))
        captions = Captions(caps)
    else:
        manifest, captions = _load_data(job["manifest"], job.get("captions"), cfg.text_mode != "none")
    log_path = Path(job["run_dir"]) / f"{job['name']}_seed{cfg.seed}.log.jsonl"
    with log_path.open("w", encoding="utf-8") as log:
        state = train(manifest, captions, cfg, log=log)
    report = evaluate(manifest.split("query"), manifest.split("gallery"), state)
    return {"variant": job["name"], "seed": cfg.seed, "report": report.to_json()}


def render_table(axis: str, rows: list[dict]) -> str:
    head = "Text input" if axis == "text" else "Fusion method"
    lines = [f"| {head} | " + " | ".join(c for c, _, _ in TABLE_COLUMNS) + " |",
             "|" + "---|" * (len(TABLE_COLUMNS) + 1)]
    for row in rows:
        cells = [f"{100 * row[c]:.2f}" for c, _, _ in TABLE_COLUMNS]
        lines.append(f"| {row['label']} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def ablate(cfg: RunConfig, axis: str, run_dir: Path, parallel: int = 0) -> dict:
    """Train every variant of ``axis`` for every seed; returns the seed-averaged table."""
    variants = TEXT_ROWS if axis == "text" else FUSION_ROWS
    jobs = []
    for label, value in variants:
        for seed in cfg.seeds:
            train_d = cfg.train.to_dict()
            train_d["seed"] = seed
            train_d["checkpoint_path"] = None
            if axis == "text":
                train_d["text_mode"] = value
            else:
                train_d["fusion"]["method"] = value
                if cfg.train.text_mode == "none":
                    raise ValidationError("the fusion axis needs a text mode other than 'none'")
            synthetic = None
            if cfg.synthetic is not None:
                synthetic = dict(copy.deepcopy(cfg.synthetic), seed=seed)
            elif cfg.manifest is None:
                raise ValidationError("ablate needs a 'synthetic' config section or a manifest")
            jobs.append({"name": value, "label": label, "train": train_d, "synthetic": synthetic,
                         "manifest": cfg.manifest, "captions": cfg.captions, "run_dir": str(run_dir)})
    partial = run_dir / f"ablate_{axis}_runs.jsonl"
    partial.write_text("")
    results = []

    def keep(res):
        results.append(res)
        with partial.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(res) + "\n")

    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            for res in pool.map(run_variant, jobs):
                keep(res)
    else:
        for job in jobs:
            keep(run_variant(job))
    rows = []
    for label, value in variants:
        runs = [r for r in results if r["variant"] == value]
        row = {"label": label, "variant": value, "seeds": [r["seed"] for r in runs]}
        for col, group, k in TABLE_COLUMNS:
            vals = [r["report"][group][k] for r in runs]
            row[col] = sum(vals) / len(vals)
            row[f"{col} per seed"] = vals
        rows.append(row)
    table = {"axis": axis, "rows": rows, "markdown": render_table(axis, rows)}
    (run_dir / f"ablate_{axis}.json").write_text(json.dumps(table, indent=2) + "\n")
    (run_dir / f"ablate_{axis}.md").write_text(table["markdown"] + "\n")
    return table


def cmd_ablate(args) -> int:
    run_dir = _run_dir(args)
    cfg = resolve_config(args)
    if args.seeds is not None:
        cfg.seeds = list(range(args.seeds))
    _echo_config(run_dir, f"ablate_{args.axis}", cfg.to_dict())
    table = ablate(cfg, args.axis, run_dir, args.parallel)
    print(table["markdown"])
    return EXIT_OK


# --- Entry point ----------------------------------------------------------


def _common(sup: bool) -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand.
    default = argparse.SUPPRESS if sup else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=default, help="JSON run config")
    p.add_argument("--set", action="append", default=default, metavar="KEY=VALUE",
                   help="override a config field, dotted for sections (repeatable)")
    p.add_argument("--run-dir", default=default, help="directory for all outputs")
    p.add_argument("--seed", type=int, default=default)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="logofuse", parents=[_common(False)],
                                     description="Text-assisted logo embedding: train, embed, evaluate, ablate.")
    parser.add_argument("--version", action="version", version=f"logofuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common(True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--visual-dim", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--informativeness", type=float)
    p.add_argument("--confusable", help="pairs as a:b,c:d")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("caption", parents=[common], help="precompute captions for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--source", choices=("file", "mock", "http"), default="mock")
    p.add_argument("--path", help="stored caption file for --source file")
    p.add_argument("--endpoint", help="caption endpoint URL for --source http")
    p.add_argument("--token-env", help="environment variable holding the bearer token")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--prompts", default=",".join(PROMPT_TYPES))
    p.add_argument("--out", help="caption JSONL (default: RUN_DIR/captions.jsonl)")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--manifest")
    p.add_argument("--captions")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="text-free embeddings from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("all", "train", "gallery", "query"), default="all")
    p.add_argument("--out")
    p.add_argument("--topk", type=int, default=0, help="also rank queries against the gallery")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", parents=[common], help="retrieval metrics for query vs gallery")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="text-input or fusion-method ablation table")
    p.add_argument("--axis", choices=("text", "fusion"), required=True)
    p.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    p.add_argument("--parallel", type=int, default=0, help="worker processes")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (LogofuseError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
