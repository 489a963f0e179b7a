"""Versioned per-severity corruption parameters.

The corruption taxonomy names the transforms but not their intensities, so
these constants pin them down for reproducibility.  Each table has exactly
five rows (severities 1..5) whose scalar `primary intensity` is strictly
increasing; bump TABLE_VERSION whenever a row changes.
"""

TABLE_VERSION = 1

SEVERITY_TABLES = {
    "gaussian_noise": [{"sigma": s} for s in (0.04, 0.06, 0.08, 0.09, 0.10)],
    "shot_noise": [{"rate": r} for r in (500.0, 250.0, 100.0, 75.0, 50.0)],
    "impulse_noise": [{"amount": a} for a in (0.01, 0.02, 0.03, 0.05, 0.07)],
    "speckle_noise": [{"scale": c} for c in (0.06, 0.10, 0.12, 0.16, 0.20)],
    "brightness": [{"delta": d} for d in (0.05, 0.10, 0.15, 0.20, 0.25)],
    "contrast": [{"factor": f} for f in (0.75, 0.60, 0.50, 0.40, 0.30)],
    "fog": [
        {"amount": a, "wibble_decay": w}
        for a, w in ((0.4, 3.0), (0.7, 3.0), (1.0, 2.5), (1.5, 2.0), (2.0, 1.75))
    ],
    # glass destructiveness scales with the local displacement (max_delta,
    # iterations); wider blur alone can partially mask the scrambling.
    "glass_blur": [
        {"sigma": s, "max_delta": d, "iterations": i}
        for s, d, i in (
            (0.2, 1, 1),
            (0.2, 1, 2),
            (0.3, 2, 1),
            (0.3, 2, 2),
            (0.4, 3, 2),
        )
    ],
    "gaussian_blur": [{"sigma": s} for s in (0.4, 0.6, 0.7, 0.8, 1.0)],
    "motion_blur": [{"length": l} for l in (3, 5, 7, 9, 11)],
    "zoom_blur": [{"max_zoom": z} for z in (1.06, 1.11, 1.16, 1.21, 1.26)],
    "translate": [{"max_shift": f} for f in (0.08, 0.14, 0.20, 0.26, 0.32)],
    "rotate": [{"max_angle": a} for a in (8.0, 15.0, 22.0, 30.0, 40.0)],
    "scale": [{"log_range": r} for r in (0.08, 0.16, 0.24, 0.32, 0.40)],
    "shear": [{"max_shear": s} for s in (0.10, 0.18, 0.26, 0.34, 0.45)],
    "stripe": [{"coverage": c} for c in (0.10, 0.15, 0.20, 0.25, 0.30)],
    "zigzag": [{"count": c} for c in (1, 2, 3, 4, 5)],
    "dotted_line": [{"count": c} for c in (1, 2, 3, 4, 5)],
    "spatter": [{"coverage": c} for c in (0.02, 0.04, 0.06, 0.09, 0.12)],
    "pixelate": [{"keep": k} for k in (0.70, 0.55, 0.45, 0.35, 0.25)],
    "elastic": [
        {"alpha": a, "sigma": s}
        for a, s in ((2.0, 6.0), (3.0, 5.5), (4.0, 5.0), (5.0, 4.5), (6.0, 4.0))
    ],
}

# Map each kind's parameter set to the scalar that must strictly increase
# with severity ("strictly more destructive").
PRIMARY_INTENSITY = {
    "gaussian_noise": lambda p: p["sigma"],
    "shot_noise": lambda p: 1.0 / p["rate"],
    "impulse_noise": lambda p: p["amount"],
    "speckle_noise": lambda p: p["scale"],
    "brightness": lambda p: p["delta"],
    "contrast": lambda p: 1.0 - p["factor"],
    "fog": lambda p: p["amount"],
    "glass_blur": lambda p: p["max_delta"] * p["iterations"] + p["sigma"],
    "gaussian_blur": lambda p: p["sigma"],
    "motion_blur": lambda p: p["length"],
    "zoom_blur": lambda p: p["max_zoom"],
    "translate": lambda p: p["max_shift"],
    "rotate": lambda p: p["max_angle"],
    "scale": lambda p: p["log_range"],
    "shear": lambda p: p["max_shear"],
    "stripe": lambda p: p["coverage"],
    "zigzag": lambda p: p["count"],
    "dotted_line": lambda p: p["count"],
    "spatter": lambda p: p["coverage"],
    "pixelate": lambda p: 1.0 - p["keep"],
    "elastic": lambda p: p["alpha"],
}
