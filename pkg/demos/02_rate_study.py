"""How fast does the symmetric-difference risk shrink as the grid refines?

Runs the two rate presets on a reduced number of replicates and prints the
log-log slope.  The default of 10 replicates takes a couple of minutes; the
acceptance run uses 50.

    python3 demos/02_rate_study.py --replicates 10
"""
import argparse

from heatchange.experiments import preset, run

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--replicates", type=int, default=10)
args = parser.parse_args()

for scenario in ("rate-model-a", "rate-model-b"):
    report = run(preset(scenario, replicates=args.replicates))
    fit = report.summary["rate_fit"]
    print(f"\n{scenario} (truth: {preset(scenario).truth['kind']})")
    for delta, risk, se in zip(fit["deltas"], fit["mean_risk"], fit["se_risk"]):
        print(f"  delta={delta:.4f}  risk={risk:.4f} +- {se:.4f}")
    lo, hi = fit["slope_ci"]
    print(f"  slope {fit['slope']:.2f}  (95% interval {lo:.2f} to {hi:.2f}), "
          f"strictly decreasing: {report.summary['strictly_decreasing']}")
    print(f"  {report.elapsed:.0f} s")

# The disk risk barely moves from n=4 to n=8: both grids pick the same square,
# which is the best tile approximation of a radius-0.3 disk at those sizes.
