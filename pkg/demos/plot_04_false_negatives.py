"""
Soft targets versus hard targets under label overlap
====================================================

When half of the samples carry a second finding, a hard-target loss
treats many matching pairs as negatives. This trains both losses on the
same data streams at two overlap levels and compares held-out zero-shot
accuracy (seed medians). Uses the base settings of the shipped ablation
grid; about one minute.
"""

from umcl.ablation import false_negative_study, format_false_negative, load_grid, \
    default_grid_path

base = load_grid(default_grid_path()).base
print("image dim", base.synth.image_dim, "within-class spread", base.synth.sigma_within)

rows = false_negative_study([0.0, 0.5], base, seeds=(0, 1, 2))
print(format_false_negative(rows))

# the same grid file drives the context-length ablation:
#   umcl ablate --out runs/ablation
