"""
A miniature end-to-end run
==========================

Trains every stage on a few hundred tasks (seconds on one core) and
prints the tables a full run writes to ``reports/``.

    python3 demos/small_run.py [out_dir]
"""

import sys

from hisr import config, pipeline

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"
cfg = config.Config().replace(
    out=out,
    bc_tasks=600,
    bc_batch=8,
    collect_tasks=60,
    holdout_tasks=20,
    N=4,
    rl_tasks=40,
    eval_tasks=60,
    ppo_iters=6,
    tasks_per_iter=8,
    eval_every=2,
)
pipe = pipeline.Pipeline(cfg)
for stage in pipeline.STAGES:
    print("stage", stage, flush=True)
    pipe.run(stage)

# %%
# Segment sizes split by outcome, then a few scored successful episodes.
print(pipe.path("segment_sizes").read_text())
for line in pipe.path("case_study").read_text().splitlines()[:12]:
    print(line)

# %%
# Greedy success of the cloned policy and the PPO-tuned one on the same tasks.
print(pipe.path("eval").read_text())
