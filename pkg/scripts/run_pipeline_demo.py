#!/usr/bin/env python3
"""Walk the whole pipeline through the command-line interface.

Generates a small synthetic dataset, builds the description dictionary with
the offline echo provider, precomputes scores, trains the full configuration,
evaluates it, and prints the report table — all inside one scratch directory.
"""

import argparse
import sys
from pathlib import Path

from etcbound.cli import main as cli


def run(argv: list[str]) -> None:
    print("$ etcbound " + " ".join(argv))
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="demo_run")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    cfg = work / "config.toml"
    cfg.write_text(
        "\n".join(
            [
                "[synth]",
                "n_instances = 120",
                "n_frames = 48",
                "feature_dim = 16",
                "gt_width_range = [0.45, 0.6]",
                "noise_sigma = 0.15",
                "n_content_tokens = 4",
                "position_cells = 16",
                "vocab_size = 64",
                "",
                "[train]",
                "epochs = 12",
                "warmup_epochs = 3",
                "lr = 0.003",
                "hidden_dim = 32",
                "",
                "[train.weights]",
                "delta_mil = 0.05",
                "alpha = 0.25",
                "beta = 0.05",
                "delta_pcl = 0.25",
            ]
        ),
        encoding="utf-8",
    )

    data = work / "data.jsonl"
    seed = str(args.seed)
    run(["gen-data", "--config", str(cfg), "--seed", seed, "--out", str(data)])
    run(["build-dict", "--dataset", str(data), "--truth", str(data.with_suffix(".truth.json")),
         "--out", str(work / "dict.jsonl"), "--seed", seed])
    run(["score", "--dataset", str(data), "--dict", str(work / "dict.jsonl"),
         "--out", str(work / "scores.jsonl")])
    run(["train", "--config", str(cfg), "--seed", seed, "--dataset", str(data),
         "--dict", str(work / "dict.jsonl"), "--scores", str(work / "scores.jsonl"),
         "--out", str(work / "run-full"), "--ablation", "full"])
    run(["eval", "--dataset", str(data), "--checkpoint", str(work / "run-full" / "checkpoint.json"),
         "--out", str(work / "run-full" / "eval.json"),
         "--hist-csv", str(work / "run-full" / "hist.csv")])
    run(["oracle", "--dataset", str(data), "--dict", str(work / "dict.jsonl"),
         "--out", str(work / "oracle.jsonl"), "--grid", "64"])
    run(["report", str(work / "run-full"), "--out", str(work / "report.json")])
    print(f"\nall artifacts under {work}/")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
