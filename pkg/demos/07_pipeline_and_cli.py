# %% [markdown]
# # The whole run, from Python and from the command line
#
# `run_pipeline` executes every stage against one output directory and writes
# a hash-stamped record per stage. The CLI drives the same code.

# %%
import json
import subprocess
import sys
import tempfile
from pathlib import Path

from upit import PipelineConfig, run_pipeline

small = {
    "model": {"vocab_size": 16, "d_h": 8, "n_layers": 2, "n_heads": 2, "d_ff": 12, "max_seq": 16},
    "corpus": {"n_train": 96, "n_eval": 32, "seq_len": 12, "vocab_size": 16},
    "prepare": {"m": 2, "pretrain_epochs": 1, "train": {"epochs": 1, "batch_size": 8}},
    "expansion": {"n": 3},
    "selection": {"fraction": 0.1},
    "upcycle": {"k": 2, "preopt": {"epochs": 2, "batch_size": 1}},
    "posttrain": {"epochs": 1, "batch_size": 8},
}
out = Path(tempfile.mkdtemp())
for rec in run_pipeline(PipelineConfig.from_dict(small), out / "py"):
    print(f"{rec.stage:16s} {rec.status:8s} {len(rec.outputs)} files")

print(json.dumps(json.loads((out / "py" / "eval" / "metrics.json").read_text())["upit"], indent=1))
print((out / "py" / "analysis" / "routing.csv").read_text()[:200])

# %%
cfg_path = out / "cfg.json"
cfg_path.write_text(json.dumps({**small, "selection": {"fraction": 0.1, "strategy": "off"}}))
cmd = [sys.executable, "-m", "upit", "--config", str(cfg_path), "--out", str(out / "cli"), "--seed", "3"]
print(subprocess.run(cmd, capture_output=True, text=True, env={"UPIT_LOG": "error"}).stdout)
