"""
The whole pipeline from the command line
========================================

Run every stage (synthetic cohort, population, segment extraction, twin
matching, training, forecasting, evaluation, report) on a deliberately tiny
configuration, then read back the tables the evaluation stage wrote.

The same run from a shell::

    glyforge --threads 1 pipeline --out /tmp/glyforge-tour \
        --set patients=8 --set days=3 --set stride=60 ...
"""

import os
import sys
import tempfile

from glyforge import cli
from glyforge.evaluation import read_metrics_table

TINY = ["patients=8", "days=3", "stride=60", "population_size=40",
        "hidden=16", "max_epochs=5", "recursive_hidden=16", "recursive_max_epochs=5"]

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="glyforge-tour-")
argv = ["--threads", "1", "pipeline", "--out", out]
for setting in TINY:
    argv += ["--set", setting]
status = cli.main(argv)
print("exit status", status)

###############################################################################
# Each stage writes its own directory with the configuration it ran under
# and a manifest of the inputs it consumed.

for stage in sorted(os.listdir(out)):
    print(f"{stage:10s}", ", ".join(sorted(os.listdir(os.path.join(out, stage)))))

###############################################################################
# The evaluation stage scores every model on the segments all of them could
# forecast; with five training epochs the neural models are far from tuned.

with open(os.path.join(out, "evaluate", "summary.txt")) as fh:
    print(fh.read())

metrics = read_metrics_table(os.path.join(out, "evaluate", "metrics.tsv"))
for model, m in metrics.items():
    print(f"{model:14s} MAE 30/120/240 min: "
          + " / ".join(f"{m.at(t)['mae']:.1f}" for t in (30, 120, 240)))
