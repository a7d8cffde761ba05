"""Short Lorenz-63 comparison (20 time units, one seed) of the continuous filters."""
import sys

from schrodinger_da import cli

horizon = float(sys.argv[1]) if len(sys.argv) > 1 else 20.0
cfg = cli.load_config("lorenz63", [f"experiment.horizon={horizon}"])
for method in ("schroedinger-transform", "schroedinger-resample", "bootstrap", "enkbf-stoch-mean"):
    for M in (5, 10):
        res = cli.run_twin_experiment(cfg, method=method, M=M)
        if res.ok:
            print(f"{method:24s} M={M:<3d} RMSE {res.summary(cfg.burn_in):.3f}")
        else:
            print(f"{method:24s} M={M:<3d} failed: {res.error}")
