"""Operator surface: gen-data, build-dict, score, train, eval, oracle, report.

Every artifact file embeds the config hash and seed that produced it; eval
refuses mismatched dataset/checkpoint pairs unless --force.  Exit codes:
0 success, 2 usage error, 3 data/contract error (JSON diagnostic on stderr).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import evalkit, matchers, synthbench, trainer
from .core import DescriptionDict, dump_jsonl, json_line, load_dataset, save_dataset
from .expand import DictionaryBuildError, EchoProvider, ExpansionConfig, HttpCaptionProvider, build_dictionary
from .losses import LossWeights
from .model import ConfigurationError
from .seeding import stable_hash
from .trainer import AblationFlags, TrainConfig, TrainingDivergedError


class DataContractError(RuntimeError):
    """Input files or their provenance hashes do not line up."""


def _load_toml(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("ETC_BOUND_THREADS")
    return int(env) if env else 1


def _synth_config(args, toml_cfg: dict) -> synthbench.SynthConfig:
    section = dict(toml_cfg.get("synth", {}))
    if "gt_width_range" in section:
        section["gt_width_range"] = tuple(section["gt_width_range"])
    if "vocab_size" in section:
        section["vocab"] = synthbench.default_vocab(section.pop("vocab_size"))
    if args.n_instances is not None:
        section["n_instances"] = args.n_instances
    if args.seed is not None:
        section["seed"] = args.seed
    return synthbench.SynthConfig(**section)


def _train_config(args, toml_cfg: dict) -> TrainConfig:
    section = dict(toml_cfg.get("train", {}))
    if "weights" in section:
        section["weights"] = LossWeights(**section["weights"])
    if "expansion" in section:
        exp = dict(section["expansion"])
        if "prompts" in exp:
            exp["prompts"] = tuple(exp["prompts"])
        section["expansion"] = ExpansionConfig(**exp)
    if "k_schedule" in section:
        section["k_schedule"] = tuple(section["k_schedule"])
    if "eval_thresholds" in section:
        section["eval_thresholds"] = tuple(section["eval_thresholds"])
    if getattr(args, "ablation", None):
        section["ablation"] = AblationFlags.from_name(args.ablation)
    if args.seed is not None:
        section["seed"] = args.seed
    return TrainConfig(**section)


def cmd_gen_data(args) -> int:
    cfg = _synth_config(args, _load_toml(args.config))
    instances, truth = synthbench.generate_dataset(cfg)
    cfg_json = json.dumps(
        {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg).items() if k != "vocab"},
        sort_keys=True,
    )
    meta = {"kind": "dataset", "config_hash": stable_hash("synth", cfg_json), "seed": cfg.seed}
    out = Path(args.out)
    save_dataset(out, instances, meta=meta)
    truth_path = Path(args.truth_out) if args.truth_out else out.with_suffix(".truth.json")
    truth_path.parent.mkdir(parents=True, exist_ok=True)
    truth_path.write_text(json_line({"_meta": meta, "videos": truth}), encoding="utf-8")
    print(f"wrote {len(instances)} instances to {out} (truth: {truth_path})")
    return 0


def _load_truth(path: str | Path) -> dict:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return obj["videos"] if "videos" in obj else obj


def cmd_build_dict(args) -> int:
    instances, data_meta = load_dataset(args.dataset)
    expansion = ExpansionConfig(
        n_p=args.n_p, n_f=args.n_f, rng_seed=args.seed or 0, max_in_flight=_threads(args)
    )
    if args.caption_endpoint:
        provider = HttpCaptionProvider(args.caption_endpoint)
    else:
        if not args.truth:
            raise DataContractError("build-dict needs --truth for the offline echo provider or --caption-endpoint")
        provider = EchoProvider.from_truth(_load_truth(args.truth), dropout=args.desc_dropout, seed=args.seed or 0)
    ddict = build_dictionary(instances, provider, expansion)
    meta = {
        "kind": "dictionary",
        "config_hash": stable_hash("dict", data_meta.get("config_hash") if data_meta else None, args.n_p, args.n_f),
        "seed": args.seed or 0,
        "dataset_hash": data_meta.get("config_hash") if data_meta else None,
    }
    ddict.save(args.out, meta=meta)
    print(f"wrote {len(ddict)} dictionary rows to {args.out}")
    return 0


def cmd_score(args) -> int:
    instances, data_meta = load_dataset(args.dataset)
    ddict = DescriptionDict.load(args.dict)
    feature_dim = instances[0].feature_dim
    embedder = matchers.default_embedder(feature_dim)
    similarity = None
    if args.caption_endpoint:
        similarity = HttpCaptionProvider(args.caption_endpoint).similarity
    scores = matchers.score_dataset(instances, ddict, embedder, args.qdm_agg, similarity)
    hashes = {inst.video_id: matchers.query_hash(inst.query_tokens) for inst in instances}
    meta = {
        "kind": "scores",
        "config_hash": stable_hash("scores", data_meta.get("config_hash") if data_meta else None, args.qdm_agg),
        "seed": data_meta.get("seed") if data_meta else None,
    }
    matchers.save_scores(args.out, scores, hashes, meta=meta)
    print(f"wrote scores for {len(scores)} videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    instances, data_meta = load_dataset(args.dataset)
    ddict = DescriptionDict.load(args.dict)
    cfg = _train_config(args, _load_toml(args.config))
    scores = None
    if args.scores:
        loaded, _ = matchers.load_scores(args.scores)
        scores = loaded
    out_dir = Path(args.out)
    result = trainer.train(
        instances, ddict, cfg, out_dir=out_dir, scores=scores, dataset_meta=data_meta,
        resume_from=args.resume_from,
    )
    last = result.epoch_rows[-1]["val"] if result.epoch_rows else None
    print(f"trained {cfg.epochs} epochs (ablation={cfg.ablation.name}); artifacts in {out_dir}")
    if last:
        print(f"final train-set rank1: {last['rank1']} mean IoU: {last['mean_iou']:.4f}")
    return 0


def _check_pairing(data_meta: dict | None, checkpoint: dict, force: bool) -> None:
    ck_meta = checkpoint.get("dataset_meta")
    if data_meta is None or ck_meta is None:
        return
    if data_meta.get("config_hash") != ck_meta.get("config_hash") or data_meta.get("seed") != ck_meta.get("seed"):
        if not force:
            raise DataContractError(
                f"checkpoint was trained on dataset {ck_meta}, got {data_meta}; use --force to override"
            )


def cmd_eval(args) -> int:
    instances, data_meta = load_dataset(args.dataset)
    checkpoint = trainer.load_checkpoint(args.checkpoint)
    _check_pairing(data_meta, checkpoint, args.force)
    cfg = TrainConfig.from_json_obj(checkpoint["config"])
    branch = args.branch or cfg.inference_branch

    pairs = [(inst, inst.gt) for inst in instances if inst.gt is not None]
    if not pairs:
        raise DataContractError("no ground-truth intervals in the dataset; nothing to evaluate")
    eval_insts = [inst for inst, _ in pairs]
    gts = [gt for _, gt in pairs]

    if branch == "p_o":
        preds = trainer.infer(eval_insts, checkpoint["params_o"])
    else:
        if not args.dict:
            raise DataContractError(f"branch {branch!r} needs --dict for region descriptions")
        ddict = DescriptionDict.load(args.dict)
        embedder = matchers.default_embedder(eval_insts[0].feature_dim)
        expanded = trainer.infer_expanded(
            eval_insts, checkpoint["params_o"], checkpoint["params_n"], ddict,
            cfg.expansion, embedder, seed=cfg.seed,
        )
        if branch == "p_n":
            preds = expanded
        else:  # midpoint
            origin = trainer.infer(eval_insts, checkpoint["params_o"])
            preds = [((a[0] + b[0]) / 2, (a[1] + b[1]) / 2) for a, b in zip(origin, expanded)]

    thresholds = tuple(args.thresholds) if args.thresholds else cfg.eval_thresholds
    report = evalkit.evaluate(preds, gts, thresholds, n_bins=args.bins)
    obj = {
        "kind": "eval",
        "config_hash": checkpoint.get("config_hash"),
        "seed": checkpoint.get("seed"),
        "ablation": cfg.ablation.name,
        "branch": branch,
        "report": report.to_json_obj(),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json_line(obj), encoding="utf-8")
    if args.hist_csv:
        Path(args.hist_csv).write_text(report.histogram.to_csv(), encoding="utf-8")
    print(evalkit.format_report_table([(cfg.ablation.name, report)]), end="")
    return 0


def cmd_oracle(args) -> int:
    instances, data_meta = load_dataset(args.dataset)
    ddict = DescriptionDict.load(args.dict)
    embedder = matchers.default_embedder(instances[0].feature_dim)
    rows = []
    for inst in instances:
        if args.kind == "qdm":
            seq = matchers.qdm_scores(inst.query_tokens, ddict, inst.video_id, inst.n_frames, embedder)
        else:
            seq = matchers.qfm_scores(inst.query_embedding, inst)
        res = synthbench.oracle_boundary(seq, args.grid, tau=args.tau, delta=args.delta, timeline=inst.timeline)
        rows.append(
            {
                "video_id": inst.video_id,
                "center": res.boundary.center,
                "width": res.boundary.width,
                "loss": res.loss,
                "margin_sum": res.margin_sum,
            }
        )
    meta = {
        "kind": "oracle",
        "config_hash": stable_hash("oracle", data_meta.get("config_hash") if data_meta else None, args.kind, args.grid),
        "seed": data_meta.get("seed") if data_meta else None,
    }
    dump_jsonl(args.out, rows, meta=meta)
    print(f"wrote {len(rows)} oracle boundaries to {args.out}")
    return 0


def cmd_report(args) -> int:
    rows = []
    consolidated = []
    for run_dir in args.runs:
        eval_path = Path(run_dir) / "eval.json" if Path(run_dir).is_dir() else Path(run_dir)
        if not eval_path.exists():
            raise DataContractError(f"no eval.json under {run_dir}")
        obj = json.loads(eval_path.read_text(encoding="utf-8"))
        rep = obj["report"]
        report = evalkit.EvalReport(
            recalls={float(k): v for k, v in rep["recalls"].items()},
            n_instances=rep["n_instances"],
            mean_iou=rep["mean_iou"],
        )
        label = obj.get("ablation", Path(run_dir).name)
        rows.append((label, report))
        consolidated.append({"ablation": label, "seed": obj.get("seed"), "report": rep})
    order = {"none": 0, "mutual": 1, "pcl": 2, "full": 3}
    rows.sort(key=lambda r: order.get(r[0], 99))
    consolidated.sort(key=lambda r: order.get(r["ablation"], 99))
    table = evalkit.format_report_table(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json_line({"kind": "ablation-report", "rows": consolidated}), encoding="utf-8")
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="etcbound", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (fallback: ETC_BOUND_THREADS)")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with ground truth")
    add_common(p)
    p.add_argument("--out", required=True, help="dataset JSONL path")
    p.add_argument("--truth-out", help="truth sidecar path (default: <out>.truth.json)")
    p.add_argument("--n-instances", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-dict", help="precompute per-frame descriptions")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--truth", help="truth sidecar for the offline echo provider")
    p.add_argument("--caption-endpoint", help="HTTP caption service URL")
    p.add_argument("--out", required=True)
    p.add_argument("--n-p", type=int, default=5)
    p.add_argument("--n-f", type=int, default=5)
    p.add_argument("--desc-dropout", type=float, default=0.0)
    p.set_defaults(func=cmd_build_dict)

    p = sub.add_parser("score", help="precompute QDM/QFM score caches")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--qdm-agg", choices=("max", "mean"), default="max")
    p.add_argument("--caption-endpoint", help="HTTP similarity service URL")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", help="train the two grounding branches")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--scores", help="precomputed score cache JSONL")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--ablation", choices=("none", "mutual", "pcl", "full"), default=None)
    p.add_argument("--resume-from", help="checkpoint to resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dict", help="needed for p_n / midpoint branches")
    p.add_argument("--out", required=True, help="eval JSON path")
    p.add_argument("--branch", choices=("p_o", "p_n", "midpoint"), default=None)
    p.add_argument("--thresholds", type=float, nargs="+", default=None)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--hist-csv", help="write the intersection-ratio histogram as CSV")
    p.add_argument("--force", action="store_true", help="skip dataset/checkpoint pairing check")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="exhaustive grid boundaries from score sequences")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("qdm", "qfm"), default="qdm")
    p.add_argument("--grid", type=int, default=128)
    p.add_argument("--tau", type=float, default=0.25)
    p.add_argument("--delta", type=float, default=0.15)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="consolidate eval outputs into an ablation table")
    add_common(p)
    p.add_argument("runs", nargs="+", help="run directories (or eval JSON files)")
    p.add_argument("--out", help="consolidated report JSON path")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataContractError, DictionaryBuildError, TrainingDivergedError, ConfigurationError,
            FileNotFoundError, KeyError, ValueError) as err:
        diagnostic = {"error": type(err).__name__, "message": str(err)}
        print(json.dumps(diagnostic), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
