"""
Feature flags for the segmentation framework.

Set these to True/False to enable or disable optional behaviour.
"""

# When True, training calls torch.use_deterministic_algorithms(True) so that two runs
# with the same seed produce identical metrics on the same platform.
# When False, torch may pick faster non-deterministic kernels.
ENABLE_DETERMINISTIC_ALGORITHMS = True

# When True, `main.py eval` also writes red/green/yellow overlay PNGs of the test
# predictions into <run>/overlays/.
ENABLE_OVERLAY_EXPORT = True

# Number of test slices written as overlays when overlay export is enabled.
OVERLAY_LIMIT = 16
