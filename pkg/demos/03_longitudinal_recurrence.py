"""
Tracking drift toward the tumour basin
======================================

Freeze a model trained on the baseline scan, then score three post-resection
follow-ups in which 0%, 10% and 20% of healthy voxels have moved halfway
toward the old tumour mode. Drift along the healthy-to-tumour axis grows with
the displaced fraction, and the healthy-basin energy rises.

The same analysis is available from the command line::

    tissue-manifold synth --scenario recurrence --out data
    tissue-manifold train --in data/t0.csv --out model.json
    tissue-manifold longitudinal --model model.json --baseline data/t0.csv \\
        --roi data/rois.json --followups data/t1.csv data/t2.csv data/t3.csv \\
        --out report.json
"""

from tissue_manifold import longitudinal, phantom, training

scenario = phantom.build_scenario(phantom.recurrence_scenario(n_followup=10_000))
model, _ = training.train(scenario.baseline, training.TrainConfig())

report = longitudinal.run_longitudinal(model, scenario.baseline, scenario.rois,
                                       scenario.followups, scenario.labels)
ell = report.axis.length
print(f"axis length {ell:.3f}, barrier {report.baseline['barrier']:.3f}")
for tp, expect in zip(report.timepoints, scenario.expectations):
    print(f"{tp.label}: drift/length {tp.drift / ell:+.4f} "
          f"(expected {expect['expected_drift_fraction']:+.4f}), "
          f"dE {tp.delta_E:+.4f} +/- {tp.se_delta_E:.4f}, permutation p {tp.p_perm:.4f}")
