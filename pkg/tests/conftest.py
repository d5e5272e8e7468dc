"""Shared fixtures, most notably the full-scale trained system.

The trained system is expensive (a complete three-stage schedule on the
default dataset), so it is built once per session and shared by every
system-level test that needs it.  Per-stage held-out snapshots are taken
at the base resolution with a fixed evaluation seed, which keeps the
sampled query pixels identical across stages — stage-to-stage deltas are
then pure model effects.
"""

import sys
import time

import pytest

from pixpoint.dataset import DatasetConfig, build_dataset
from pixpoint.evaluation import localization_eval, retrieval_protocol_eval
from pixpoint.model import AlignmentModel
from pixpoint.training import Trainer, default_stage_configs

ACC_EVAL_SEED = 0


def _log(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


@pytest.fixture(scope="session")
def trained_system(tmp_path_factory):
    """Default dataset + model taken through the full staged schedule.

    Returns a dict with the dataset, the trained model, the stage configs,
    per-stage held-out snapshots (LocAcc@1, R@1, MRR at base resolution),
    the final checkpoint, and the pure training wall time in seconds
    (snapshot overhead excluded).
    """
    out = tmp_path_factory.mktemp("trained")
    _log("[trained_system] building default dataset ...")
    dataset = build_dataset(DatasetConfig())
    model = AlignmentModel()
    trainer = Trainer(model, dataset, out_dir=str(out), seed=0)
    configs = default_stage_configs(dataset.config.resolution)

    snapshots = []
    overhead = [0.0]

    def snapshot(cfg, ck):
        t0 = time.perf_counter()
        base = dataset.config.resolution
        loc = localization_eval(model, dataset, dataset.heldout_ids,
                                "s4-random", ACC_EVAL_SEED, base,
                                k_list=(1,))
        ret = retrieval_protocol_eval(model, dataset, dataset.heldout_ids,
                                      "s4-random", ACC_EVAL_SEED, base,
                                      k_list=(1,))
        snapshots.append({"stage": cfg.stage, "loc1": loc.scores[1],
                          "r1": ret.recall[1], "mrr": ret.mrr})
        overhead[0] += time.perf_counter() - t0
        _log(f"[trained_system] stage {cfg.stage} done: "
             f"LocAcc@1={loc.scores[1]:.2f} R@1={ret.recall[1]:.2f} "
             f"MRR={ret.mrr:.2f}")

    train_start = time.perf_counter()
    final = trainer.run_all(configs, stage_end_hook=snapshot)
    train_seconds = time.perf_counter() - train_start - overhead[0]
    _log(f"[trained_system] training wall time {train_seconds / 60:.1f} min")
    return {"dataset": dataset, "model": model, "configs": configs,
            "snapshots": snapshots, "train_seconds": train_seconds,
            "checkpoint": final, "out_dir": str(out),
            "eval_seed": ACC_EVAL_SEED}
