"""Desk-scale training runs shared by the acceptance tests.

Everything goes through the command line entry point, the same way a user
would run it.  Per seed:

  full/       train --stage all                 (stage 0, 1, 2)
  nobistage/  train --stage 2 --ablation no-bistage from full/ckpt-stage0,
              with stage 2 given the stage 1 + stage 2 step budget

The no-joint model is full/ckpt-stage1 evaluated with the quantizer on.

Set STREAMTOK_DESK_RUNS to a directory to keep the runs between sessions;
finished runs found there are reused.  Run this file directly to build them
ahead of time: ``python tests/desk_runs.py DIR [SEED ...]``.
"""

from __future__ import annotations

import dataclasses
import shutil
import sys
import time
from pathlib import Path

from streamtok import cli
from streamtok import synthcorpus as sc
from streamtok.trainer import TrainConfig

SEEDS = (0, 1, 2)
CORPUS_SEED = 7
CORPUS_SIZE = 500
LONGFORM_SEGMENTS = 40


def _run(argv):
    code = cli.main(argv)
    if code != 0:
        raise RuntimeError(f"streamtok {' '.join(argv)} exited with {code}")


def build_corpora(root: Path) -> tuple[Path, Path]:
    """Noisy training corpus and its noiseless twin (same text and durations)."""
    noisy, clean = root / "corpus", root / "corpus-clean"
    if not (noisy / "run-manifest").exists():
        shutil.rmtree(noisy, ignore_errors=True)
        _run(["gen-corpus", "--out", str(noisy), "--seed", str(CORPUS_SEED), "--num", str(CORPUS_SIZE)])
    if not (clean / "run-manifest").exists():
        shutil.rmtree(clean, ignore_errors=True)
        _run(["gen-corpus", "--out", str(clean), "--seed", str(CORPUS_SEED), "--num", str(CORPUS_SIZE),
              "--noise", "0", "--longform", str(LONGFORM_SEGMENTS)])
    return noisy, clean


@dataclasses.dataclass
class DeskRun:
    seed: int
    root: Path
    seconds_all: float
    seconds_nobistage: float

    @property
    def full(self) -> Path:
        return self.root / "full" / "ckpt-stage2.tsck"

    @property
    def nojoint(self) -> Path:
        return self.root / "full" / "ckpt-stage1.tsck"

    @property
    def nobistage(self) -> Path:
        return self.root / "nobistage" / "ckpt-stage2.tsck"


def _timed(argv) -> float:
    t0 = time.perf_counter()
    _run(argv)
    return time.perf_counter() - t0


def build_run(root: Path, corpus: Path, seed: int) -> DeskRun:
    base = root / f"seed{seed}"
    stamp = base / "seconds.txt"
    if stamp.exists():
        a, b = (float(x) for x in stamp.read_text().split())
        return DeskRun(seed, base, a, b)
    shutil.rmtree(base, ignore_errors=True)
    full, nob = base / "full", base / "nobistage"
    common = ["--corpus", str(corpus), "--seed", str(seed), "--quiet"]
    t_all = _timed(["train", "--out", str(full), "--stage", "all", *common])
    nob.mkdir(parents=True)
    shutil.copy(full / "ckpt-stage0.tsck", nob / "ckpt-stage0.tsck")
    tc = TrainConfig()
    t_nob = _timed(["train", "--out", str(nob), "--stage", "2", "--ablation", "no-bistage",
                    "--steps2", str(tc.steps_stage1 + tc.steps_stage2), *common])
    stamp.write_text(f"{t_all} {t_nob}\n")
    return DeskRun(seed, base, t_all, t_nob)


def corpus_config() -> sc.CorpusConfig:
    return sc.CorpusConfig(seed=CORPUS_SEED, num_utterances=CORPUS_SIZE)


if __name__ == "__main__":
    out = Path(sys.argv[1])
    seeds = [int(s) for s in sys.argv[2:]] or SEEDS
    noisy, _ = build_corpora(out)
    for s in seeds:
        run = build_run(out, noisy, s)
        print(f"seed {s}: train --stage all {run.seconds_all:.0f}s, no-bistage {run.seconds_nobistage:.0f}s",
              flush=True)
