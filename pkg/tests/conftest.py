import gazezsl.autodiff as ad

# every forward op asserts finite outputs while the suite runs
ad.set_debug_checks(True)
