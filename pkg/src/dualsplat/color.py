"""sRGB transfer functions (IEC 61966-2-1)."""

import numpy as np

KNEE = 0.0031308


def linear_to_srgb(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= KNEE, 12.92 * x, 1.055 * np.power(np.maximum(x, KNEE), 1.0 / 2.4) - 0.055)


def linear_to_srgb_grad(x):
    """Derivative of :func:`linear_to_srgb` (right-sided at the knee)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(
        x <= KNEE,
        12.92,
        1.055 / 2.4 * np.power(np.maximum(x, KNEE), 1.0 / 2.4 - 1.0),
    )


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, np.power((np.maximum(x, 0.04045) + 0.055) / 1.055, 2.4))
