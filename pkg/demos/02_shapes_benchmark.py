# # The Shapes-3 benchmark and the data-access protocol
#
# Renders a small copy of the benchmark, saves a preview grid and shows
# which reads the protocol allows. Run with
# `python demos/02_shapes_benchmark.py [out_dir]`.

import sys
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from contuda.data import AccessLog, AccessRecord, audit, generate_benchmark, load_batch, shapes3
from contuda.errors import ProtocolViolation

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())

# ## Render
#
# Source is the canonical rendering. Target 1 rotates hue by 40 degrees and
# adds noise; target 2 rotates by 200 degrees, darkens and adds stripes.

specs = shapes3(seed=0)
for s in specs:
    print(s)
manifests = generate_benchmark(specs, out / "data", n_train=16, n_eval=8)

rows = [np.concatenate(list(m.images("train")[:6]), axis=1) for m in manifests]
preview = out / "shapes3_preview.png"
Image.fromarray(np.concatenate(rows, axis=0)).resize((6 * 128, 3 * 128), Image.NEAREST).save(preview)
print("preview written to", preview)

# ## Labels do not move under a shift
#
# With a shared layout seed, two domains have identical label maps.

from contuda.data import DomainSpec, generate_domain

a = generate_domain(DomainSpec("plain", seed=7), 4, 2, out / "inv")
b = generate_domain(DomainSpec("shifted", hue_shift=200, texture_strength=0.5, seed=7), 4, 2, out / "inv")
print("labels identical:", bool((a.labels("train") == b.labels("train")).all()))
print("pixels identical:", bool((a.images("train") == b.images("train")).all()))

# ## Protocol
#
# At step 2 the trainer may read the source and target 2, never target 1.

log = AccessLog()
rng = np.random.default_rng(0)
source, t1, t2 = manifests
load_batch(source, "train", 4, 2, log, rng=rng)
batch = load_batch(t2, "train", 4, 2, log, rng=rng)
print("target-2 training samples carry labels:", any(s.label is not None for s in batch))
try:
    load_batch(t1, "train", 4, 2, log, rng=rng)
except ProtocolViolation as exc:
    print("refused:", exc)

evals = load_batch(t1, "eval", None, 2, log, indices=[0, 1], context="eval")
print("evaluation of target 1 at step 2 has labels:", all(s.label is not None for s in evals))

print("audit of the compliant log:", audit(log, 2)["violations"])
log.append(AccessRecord(2, "target1", "train", 4, "train", "target", 1))
print("after an injected read:", audit(log, 2)["violations"])
