# # Ablation over the three anti-forgetting components
#
# Distribution distillation, feature distillation and multiple heads,
# toggled as in the method flags. Writes `ablation.json` / `ablation.txt`.
# Arguments: iterations per step (default 300) and a comma-separated seed
# list (default "0").

import sys
import tempfile
from pathlib import Path

from contuda.experiment import ablate, desk_run_config, prepare_data
from contuda.metrics import format_ablation_table

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
seeds = [int(s) for s in (sys.argv[2] if len(sys.argv) > 2 else "0").split(",")]
out = Path(tempfile.mkdtemp())

cfg = desk_run_config(output_dir=out, iterations_per_step=iterations)
manifests, _ = prepare_data(cfg)

methods = ["continual_baseline", "dd_only", "fd_only", "dd_fd", "muhdi"]
result = ablate(cfg, manifests, methods, seeds)

print(format_ablation_table(result["rows"]))
print()
for row in result["rows"]:
    print(f"{row['method']:<20} target1 forgetting {row['forgetting'].get('target1', float('nan')):6.1f}")
print("files in", out)
