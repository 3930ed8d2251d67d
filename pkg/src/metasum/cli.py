"""Command-line entry points: gen-data, train, generate, eval, report.

Run layout under the run root (METASUM_RUN_ROOT or ./runs):

    <root>/<name>/manifest.json                 effective manifest echo
    <root>/<name>/<kind>/seed<k>/epoch<e>.ckpt  one dir per (kind, seed)
    <root>/<name>/<kind>/seed<k>/metrics.jsonl
    <root>/<name>/report/<kind>.json            aggregated eval reports
    <root>/<name>/report/comparison.{txt,tsv,csv} + figures
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from .evaluation import aggregate, evaluate_model, render_table
from .metadata import FeatureKind
from .model import ModelConfig, load_checkpoint
from .pipeline import DEFAULT_VOCAB_SIZE, DataBundle, prepare
from .report import load_report_json, render_report
from .synthgen import CorpusSpec, read_corpus, write_corpus
from .training import TrainConfig, select_best_epoch, train_one_seed

RUN_ROOT_ENV = "METASUM_RUN_ROOT"


def run_root(override: Optional[str] = None) -> Path:
    return Path(override or os.environ.get(RUN_ROOT_ENV, "runs"))


@dataclass
class RunManifest:
    """One experiment: a corpus, the feature kinds to compare, and the seeds."""

    name: str
    corpus: str
    kinds: List[FeatureKind] = field(default_factory=list)
    seeds: List[int] = field(default_factory=lambda: [1, 2, 3])
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    vocab_size: int = DEFAULT_VOCAB_SIZE
    group_seed: int = 0

    def __post_init__(self) -> None:
        self.kinds = [FeatureKind.parse(k) if isinstance(k, str) else k
                      for k in self.kinds]
        if FeatureKind.VANILLA not in self.kinds:
            self.kinds.insert(0, FeatureKind.VANILLA)  # baseline is mandatory

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        return {"name": self.name, "corpus": str(self.corpus),
                "kinds": [k.value for k in self.kinds], "seeds": list(self.seeds),
                "model": dict(self.model), "train": dict(self.train),
                "vocab_size": self.vocab_size, "group_seed": self.group_seed}


def _load_bundle(manifest: RunManifest) -> DataBundle:
    cases, tag_lex, icd_lex, splits = read_corpus(manifest.corpus)
    model_cfg = dict(manifest.model)
    max_in = model_cfg.get("max_input_len", ModelConfig.__dataclass_fields__["max_input_len"].default)
    max_out = model_cfg.get("max_output_len", ModelConfig.__dataclass_fields__["max_output_len"].default)
    return prepare(cases, splits, tag_lex, icd_lex, max_in, max_out,
                   vocab_size=manifest.vocab_size, group_seed=manifest.group_seed)


def _model_config(manifest: RunManifest, bundle: DataBundle,
                  kind: FeatureKind) -> ModelConfig:
    return ModelConfig(vocab_size=bundle.vocab.size, feature_kind=kind,
                       **manifest.model)


def _train_job(manifest_dict: dict, kind_name: str, seed: int, out_dir: str,
               resume: bool) -> str:
    """Self-contained (kind, seed) training job; safe as a subprocess target."""
    manifest = RunManifest(**manifest_dict)
    bundle = _load_bundle(manifest)
    kind = FeatureKind.parse(kind_name)
    config = _model_config(manifest, bundle, kind)
    tcfg = TrainConfig.from_dict({**manifest.train, "seeds": [seed]})
    train_one_seed(config, bundle.train, bundle.valid, tcfg, seed,
                   bundle.vocab, bundle.tag_lexicon,
                   run_dir=Path(out_dir), resume=resume,
                   log=lambda m: print(f"[{kind.value}] {m}", flush=True))
    return f"{kind.value}/seed{seed}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec_dict = {}
    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            spec_dict = json.load(fh)
    if args.cases is not None:
        spec_dict["n_cases"] = args.cases
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    for name in ("hospital", "physician", "disease", "stay"):
        value = getattr(args, f"{name}_coupling")
        if value is not None:
            spec_dict[f"{name}_coupling"] = value
    try:
        spec = CorpusSpec.from_dict(spec_dict)
    except (TypeError, ValueError) as exc:
        print(f"bad corpus spec: {exc}", file=sys.stderr)
        return 1
    stats = write_corpus(args.out, spec)
    print(stats.render())
    print(f"wrote corpus to {args.out}")
    return 0


def cmd_train(args) -> int:
    manifest = RunManifest.load(args.manifest)
    root = run_root(args.run_root) / manifest.name
    root.mkdir(parents=True, exist_ok=True)
    if not Path(manifest.corpus, "corpus.jsonl").exists():
        print(f"corpus not found at {manifest.corpus}", file=sys.stderr)
        return 1
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)

    jobs = [(kind, seed) for kind in manifest.kinds for seed in manifest.seeds]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futures = [pool.submit(_train_job, manifest.to_dict(), kind.value,
                                   seed, str(root / kind.value), args.resume)
                       for kind, seed in jobs]
            for fut in futures:
                print(f"finished {fut.result()}")
    else:
        for kind, seed in jobs:
            _train_job(manifest.to_dict(), kind.value, seed,
                       str(root / kind.value), args.resume)
            print(f"finished {kind.value}/seed{seed}")
    return 0


def _selected_checkpoint(seed_dir: Path) -> Path:
    metrics_path = seed_dir / "metrics.jsonl"
    if not metrics_path.exists():
        raise FileNotFoundError(f"missing metrics at {metrics_path}")
    scores = []
    with open(metrics_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                scores.append(json.loads(line)["valid_rouge1"])
    epoch = select_best_epoch(scores)
    ckpt = seed_dir / f"epoch{epoch}.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    return ckpt


def cmd_eval(args) -> int:
    manifest = RunManifest.load(args.manifest)
    root = run_root(args.run_root) / manifest.name
    bundle = _load_bundle(manifest)
    report_dir = root / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    missing = []
    reports = {}
    for kind in manifest.kinds:
        per_seed = []
        for seed in manifest.seeds:
            seed_dir = root / kind.value / f"seed{seed}"
            try:
                ckpt = _selected_checkpoint(seed_dir)
            except FileNotFoundError as exc:
                missing.append(str(exc))
                continue
            params = load_checkpoint(ckpt)
            per_seed.append(evaluate_model(params, bundle.test, bundle.vocab,
                                           bundle.tag_lexicon, seed=seed))
        if per_seed:
            reports[kind] = aggregate(per_seed)
    if missing:
        print("missing artifacts:\n  " + "\n  ".join(missing), file=sys.stderr)
        return 1

    for kind, rep in reports.items():
        with open(report_dir / f"{kind.value}.json", "w", encoding="utf-8") as fh:
            fh.write(rep.to_json())
    table = render_table(reports)
    (report_dir / "comparison.txt").write_text(table + "\n", encoding="utf-8")
    from .report import write_delimited
    write_delimited(reports, report_dir / "comparison.tsv", delimiter="\t")
    print(table)
    return 0


def cmd_generate(args) -> int:
    if not Path(args.checkpoint).exists():
        print(f"missing checkpoint {args.checkpoint}", file=sys.stderr)
        return 1
    if not args.manifest and not args.corpus:
        print("need --manifest or --corpus", file=sys.stderr)
        return 1
    params = load_checkpoint(args.checkpoint)
    if args.manifest:
        bundle = _load_bundle(RunManifest.load(args.manifest))
    else:
        cases, tag_lex, icd_lex, splits = read_corpus(args.corpus)
        cfg = params.config
        bundle = prepare(cases, splits, tag_lex, icd_lex,
                         cfg.max_input_len, cfg.max_output_len)
    cases = {"train": bundle.train, "valid": bundle.valid,
             "test": bundle.test}[args.split]
    from .model import generate_batch
    from .text import detokenize
    with open(args.out, "w", encoding="utf-8") as fh:
        for lo in range(0, len(cases), 64):
            part = cases[lo:lo + 64]
            outs = generate_batch([(c.src, c.features) for c in part], params)
            for case, ids in zip(part, outs):
                fh.write(json.dumps(
                    {"case_id": case.case_id,
                     "generated": detokenize(ids, bundle.vocab)},
                    ensure_ascii=False) + "\n")
    print(f"wrote generations for {len(cases)} cases to {args.out}")
    return 0


def cmd_report(args) -> int:
    manifest = RunManifest.load(args.manifest)
    root = run_root(args.run_root) / manifest.name
    report_dir = root / "report"
    reports = {}
    for kind in manifest.kinds:
        path = report_dir / f"{kind.value}.json"
        if not path.exists():
            print(f"missing eval report {path}; run `metasum eval` first",
                  file=sys.stderr)
            return 1
        reports[kind] = load_report_json(path)
    metrics: Dict[str, List[dict]] = {}
    for kind in manifest.kinds:
        for seed in manifest.seeds:
            mpath = root / kind.value / f"seed{seed}" / "metrics.jsonl"
            if mpath.exists():
                with open(mpath, encoding="utf-8") as fh:
                    metrics[f"{kind.value}/s{seed}"] = [
                        json.loads(l) for l in fh if l.strip()]
    written = render_report(reports, metrics, report_dir)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metasum",
        description="metadata-conditioned summarization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--spec", help="JSON file of CorpusSpec fields")
    p.add_argument("--cases", type=int, help="override number of cases")
    p.add_argument("--seed", type=int, help="override generator seed")
    for name in ("hospital", "physician", "disease", "stay"):
        p.add_argument(f"--{name}-coupling", type=float, default=None,
                       dest=f"{name}_coupling")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model per (kind, seed)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-root", default=None)
    p.add_argument("--resume", action="store_true",
                   help="continue from the last complete epoch")
    p.add_argument("--parallel", type=int, default=1,
                   help="run this many (kind, seed) jobs as separate processes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode a corpus split with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="corpus directory (if no manifest)")
    p.add_argument("--manifest", help="manifest to take data settings from")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score selected checkpoints on the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-root", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render figures and CSV from eval output")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-root", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
