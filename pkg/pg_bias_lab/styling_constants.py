# ABOUTME: This file contains colour and geometry constants for the lab's SVG plots.
# ABOUTME: It assigns each training variant a stable colour and maps loss values onto a heatmap ramp.
"""
Styling constants for the SVG figures written by pg_bias_lab.plotting.

Variants keep the same colour across every figure of a run, so a biased baseline
curve in a performance plot matches the one in the off-policy plot.
"""

# Canvas geometry (pixels)
PLOT_WIDTH = 720
PLOT_HEIGHT = 440
PLOT_MARGIN_LEFT = 70
PLOT_MARGIN_RIGHT = 180  # room for the legend
PLOT_MARGIN_TOP = 40
PLOT_MARGIN_BOTTOM = 50
LEGEND_ROW_HEIGHT = 18
FONT_FAMILY = "DejaVu Sans"
FONT_POINT_SIZE = 9

BACKGROUND_HEX = "#FFFFFF"
AXIS_HEX = "#3C3C3C"
GRID_HEX = "#E0E0E0"
BAND_ALPHA = 60  # 0-255, for the mean +- std band fill
CENTER_MARKER_HEX = "#FFFFFF"

VARIANT_COLORS_HEX = {
    "unbiased_baseline": "#1F77B4",
    "biased_baseline": "#D62728",
    "unbiased_experimental": "#2CA02C",
    "biased_experimental": "#FF7F0E",
    "uncorrected": "#D62728",
    "corrected": "#2CA02C",
    "d1": "#2CA02C",
    "d2": "#D62728",
    "d_pct": "#9467BD",
}
FALLBACK_COLORS_HEX = ["#8C564B", "#E377C2", "#7F7F7F", "#BCBD22", "#17BECF"]

# Heatmap ramp from low loss to high loss
HEATMAP_LOW_HEX = "#2166AC"
HEATMAP_MID_HEX = "#F7F7F7"
HEATMAP_HIGH_HEX = "#B2182B"

# Scatter plots colour each point by its action on a two-colour ramp
SCATTER_LOW_HEX = "#4575B4"
SCATTER_HIGH_HEX = "#D73027"
SCATTER_POINT_RADIUS = 2.5


def variant_color(name: str, index: int = 0) -> str:
    """
    Colour for a plotted series.

    Args:
        name: variant or series name
        index: position of the series, used when the name has no assigned colour

    Returns:
        str: hex colour
    """
    return VARIANT_COLORS_HEX.get(name, FALLBACK_COLORS_HEX[index % len(FALLBACK_COLORS_HEX)])


def _hex_to_rgb(value: str) -> tuple[int, int, int]:
    value = value.lstrip("#")
    return int(value[0:2], 16), int(value[2:4], 16), int(value[4:6], 16)


def _mix(a: str, b: str, t: float) -> tuple[int, int, int]:
    ra, ga, ba = _hex_to_rgb(a)
    rb, gb, bb = _hex_to_rgb(b)
    return (round(ra + (rb - ra) * t), round(ga + (gb - ga) * t), round(ba + (bb - ba) * t))


def heatmap_rgb(fraction: float) -> tuple[int, int, int]:
    """RGB for a value at `fraction` in [0, 1] of the loss range (0 = lowest loss)."""
    fraction = min(max(fraction, 0.0), 1.0)
    if fraction < 0.5:
        return _mix(HEATMAP_LOW_HEX, HEATMAP_MID_HEX, fraction * 2.0)
    return _mix(HEATMAP_MID_HEX, HEATMAP_HIGH_HEX, (fraction - 0.5) * 2.0)


def scatter_rgb(fraction: float) -> tuple[int, int, int]:
    fraction = min(max(fraction, 0.0), 1.0)
    return _mix(SCATTER_LOW_HEX, SCATTER_HIGH_HEX, fraction)
