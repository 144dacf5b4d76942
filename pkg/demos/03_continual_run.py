# # A two-step continual run: baseline against multi-head distillation
#
# Trains the continual baseline and the full method on Shapes-3 and prints
# per-step mIoU and forgetting. The default is a short run; pass the
# iteration count as the first argument (3000 matches the acceptance run,
# about 10 minutes on one CPU core).

import sys
import tempfile
from pathlib import Path

from contuda.data import AccessLog, generate_benchmark, shapes3
from contuda.experiment import desk_trainer
from contuda.metrics import format_step_table
from contuda.trainer import run_protocol, train_step, with_method

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = Path(tempfile.mkdtemp())

manifests = generate_benchmark(shapes3(), out / "data", n_train=2000, n_eval=200)
source, targets = manifests[0], manifests[1:]

cfg = desk_trainer(iterations_per_step=iterations, seed=0)
print(cfg.weights, "lr", cfg.lr_seg)

# ## Step 1 is shared
#
# Every method trains identically on source -> target 1, so train it once.

first, _ = train_step(cfg, 1, source, targets[0], None, AccessLog())

# ## Step 2 for each method

results = {}
for method in ("continual_baseline", "muhdi"):
    res = run_protocol(with_method(cfg, method), source, targets, run_dir=out / method, first_step=first)
    results[method] = res
    print(f"\n== {method}")
    for report in res["reports"]:
        print(format_step_table(report))
    print("audit compliant:", res["audit"]["compliant"])

# ## Forgetting on target 1

for method, res in results.items():
    final = res["reports"][-1]
    print(f"{method:<20} forgetting {final.forgetting['target1']:6.1f}   mIoU avg {final.miou_avg:6.1f}")
print("run directories under", out)
