# ABOUTME: This file renders the lab's figures as SVG files through Qt's SVG paint device.
# ABOUTME: It draws learning curves with mean +- std bands, loss-surface heatmaps and feature scatter plots.
import logging
import math
import os
import sys
from contextlib import contextmanager
from typing import Sequence

import numpy as np
from PyQt5.QtCore import QPointF, QRect, QRectF, QSize, Qt
from PyQt5.QtGui import QBrush, QColor, QFont, QGuiApplication, QPainter, QPen, QPolygonF
from PyQt5.QtSvg import QSvgGenerator

from . import styling_constants as style
from .exceptions import DomainError

logger = logging.getLogger(__name__)

N_TICKS = 5
_app = None


def ensure_qt_app() -> QGuiApplication:
    """Return the running Qt application, creating an offscreen one if needed."""
    global _app
    app = QGuiApplication.instance()
    if app is None:
        os.environ.setdefault("QT_QPA_PLATFORM", "offscreen")
        _app = QGuiApplication(sys.argv[:1] or ["pg-bias-lab"])
        app = _app
    return app


class _Frame:
    """Maps data coordinates into the plotting rectangle of the canvas."""

    def __init__(self, x_range: tuple[float, float], y_range: tuple[float, float],
                 width: int = style.PLOT_WIDTH, height: int = style.PLOT_HEIGHT):
        self.left = style.PLOT_MARGIN_LEFT
        self.top = style.PLOT_MARGIN_TOP
        self.right = width - style.PLOT_MARGIN_RIGHT
        self.bottom = height - style.PLOT_MARGIN_BOTTOM
        self.x_min, self.x_max = _padded(*x_range)
        self.y_min, self.y_max = _padded(*y_range)

    def x(self, value: float) -> float:
        return self.left + (value - self.x_min) / (self.x_max - self.x_min) * (self.right - self.left)

    def y(self, value: float) -> float:
        return self.bottom - (value - self.y_min) / (self.y_max - self.y_min) * (self.bottom - self.top)

    def point(self, x: float, y: float) -> QPointF:
        return QPointF(self.x(x), self.y(y))


def _padded(low: float, high: float) -> tuple[float, float]:
    if not (math.isfinite(low) and math.isfinite(high)):
        raise DomainError("plot range", (low, high), "finite")
    if high - low < 1e-12:
        pad = max(abs(low) * 0.05, 1e-3)
        return low - pad, high + pad
    return low, high


@contextmanager
def _svg_painter(path: str, title: str, width: int = style.PLOT_WIDTH, height: int = style.PLOT_HEIGHT):
    ensure_qt_app()
    generator = QSvgGenerator()
    generator.setFileName(path)
    generator.setSize(QSize(width, height))
    generator.setViewBox(QRect(0, 0, width, height))
    generator.setTitle(title)
    painter = QPainter()
    if not painter.begin(generator):
        raise OSError(f"Cannot open SVG device for {path}")
    try:
        painter.setRenderHint(QPainter.Antialiasing)
        painter.fillRect(QRect(0, 0, width, height), QColor(style.BACKGROUND_HEX))
        painter.setFont(QFont(style.FONT_FAMILY, style.FONT_POINT_SIZE))
        painter.setPen(QPen(QColor(style.AXIS_HEX)))
        painter.drawText(QRectF(0, 8, width, 24), Qt.AlignHCenter, title)
        yield painter
    finally:
        painter.end()
    logger.info(f"Plot written to {path}")


def _draw_axes(painter: QPainter, frame: _Frame, x_label: str, y_label: str) -> None:
    painter.setPen(QPen(QColor(style.GRID_HEX), 1))
    for value in np.linspace(frame.y_min, frame.y_max, N_TICKS):
        painter.drawLine(QPointF(frame.left, frame.y(value)), QPointF(frame.right, frame.y(value)))
    painter.setPen(QPen(QColor(style.AXIS_HEX), 1))
    painter.drawRect(QRectF(frame.left, frame.top, frame.right - frame.left, frame.bottom - frame.top))
    for value in np.linspace(frame.y_min, frame.y_max, N_TICKS):
        painter.drawText(QRectF(0, frame.y(value) - 8, frame.left - 6, 16), Qt.AlignRight | Qt.AlignVCenter,
                         f"{value:.3g}")
    for value in np.linspace(frame.x_min, frame.x_max, N_TICKS):
        painter.drawText(QRectF(frame.x(value) - 30, frame.bottom + 4, 60, 16), Qt.AlignHCenter, f"{value:.3g}")
    painter.drawText(QRectF(frame.left, frame.bottom + 24, frame.right - frame.left, 18), Qt.AlignHCenter, x_label)
    painter.save()
    painter.translate(14, (frame.top + frame.bottom) / 2)
    painter.rotate(-90)
    painter.drawText(QRectF(-120, -8, 240, 16), Qt.AlignHCenter, y_label)
    painter.restore()


def curve_statistics(runs: Sequence[Sequence[float]]) -> tuple[np.ndarray, np.ndarray]:
    """Per-epoch mean and sample standard deviation across seeds (std 0 for a single seed)."""
    if len(runs) == 0:
        raise DomainError("runs", 0, "at least one run")
    length = min(len(r) for r in runs)
    matrix = np.array([np.asarray(r, dtype=float)[:length] for r in runs])
    std = matrix.std(axis=0, ddof=1) if len(runs) > 1 else np.zeros(length)
    return matrix.mean(axis=0), std


def write_curves_svg(path: str, series: dict[str, Sequence[Sequence[float]]], title: str,
                     x_label: str = "epoch", y_label: str = "mean return") -> str:
    """
    One mean line and one mean +- std band per entry of `series`.

    Args:
        series: name -> list of per-seed value sequences indexed by epoch.
    """
    stats = {name: curve_statistics(runs) for name, runs in series.items() if len(runs) > 0}
    if not stats or all(len(mean) == 0 for mean, _ in stats.values()):
        raise DomainError("series", list(series), "at least one non-empty run")
    longest = max(len(mean) for mean, _ in stats.values())
    low = min(float(np.min(mean - std)) for mean, std in stats.values() if len(mean))
    high = max(float(np.max(mean + std)) for mean, std in stats.values() if len(mean))
    frame = _Frame((0.0, float(max(longest - 1, 1))), (low, high))

    with _svg_painter(path, title) as painter:
        _draw_axes(painter, frame, x_label, y_label)
        for index, (name, (mean, std)) in enumerate(stats.items()):
            color = QColor(style.variant_color(name, index))
            epochs = np.arange(len(mean))
            band = QPolygonF([frame.point(e, v) for e, v in zip(epochs, mean + std)]
                             + [frame.point(e, v) for e, v in zip(epochs[::-1], (mean - std)[::-1])])
            fill = QColor(color)
            fill.setAlpha(style.BAND_ALPHA)
            painter.setPen(Qt.NoPen)
            painter.setBrush(QBrush(fill))
            painter.drawPolygon(band)
            painter.setBrush(Qt.NoBrush)
            painter.setPen(QPen(color, 1.6))
            painter.drawPolyline(QPolygonF([frame.point(e, v) for e, v in zip(epochs, mean)]))
            legend_y = frame.top + index * style.LEGEND_ROW_HEIGHT
            painter.drawLine(QPointF(frame.right + 12, legend_y + 8), QPointF(frame.right + 36, legend_y + 8))
            painter.setPen(QPen(QColor(style.AXIS_HEX)))
            painter.drawText(QRectF(frame.right + 42, legend_y, style.PLOT_MARGIN_RIGHT - 46,
                                    style.LEGEND_ROW_HEIGHT), Qt.AlignLeft | Qt.AlignVCenter, name)
    return path


def write_surface_svg(path: str, grid: np.ndarray, a_coords: Sequence[float], b_coords: Sequence[float],
                      title: str) -> str:
    """Heatmap of grid[i, j] at (a_i, b_j) with the centre (current policy) marked."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2 or grid.shape != (len(a_coords), len(b_coords)):
        raise DomainError("grid.shape", grid.shape, "(len(a_coords), len(b_coords))")
    low, high = float(grid.min()), float(grid.max())
    span = high - low if high > low else 1.0
    frame = _Frame((float(a_coords[0]), float(a_coords[-1])), (float(b_coords[0]), float(b_coords[-1])))
    cell_w = (frame.right - frame.left) / grid.shape[0]
    cell_h = (frame.bottom - frame.top) / grid.shape[1]

    with _svg_painter(path, title) as painter:
        painter.setPen(Qt.NoPen)
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                painter.setBrush(QBrush(QColor(*style.heatmap_rgb((grid[i, j] - low) / span))))
                painter.drawRect(QRectF(frame.left + i * cell_w, frame.bottom - (j + 1) * cell_h, cell_w, cell_h))
        _draw_axes(painter, frame, "direction 1", "direction 2")
        painter.setPen(QPen(QColor(style.AXIS_HEX), 1.2))
        painter.setBrush(QBrush(QColor(style.CENTER_MARKER_HEX)))
        painter.drawEllipse(frame.point(0.0, 0.0), 4.0, 4.0)
        painter.drawText(QRectF(frame.right + 12, frame.top, style.PLOT_MARGIN_RIGHT - 16, 36),
                         Qt.AlignLeft, f"loss {low:.3g} .. {high:.3g}")
    return path


def write_scatter_svg(path: str, projected: np.ndarray, actions: Sequence[float], title: str) -> str:
    """Projected features coloured by action value."""
    projected = np.asarray(projected, dtype=float)
    values = np.asarray(actions, dtype=float).reshape(len(projected), -1)[:, 0]
    if projected.ndim != 2 or projected.shape[1] != 2:
        raise DomainError("projected.shape", projected.shape, "(n, 2)")
    frame = _Frame((float(projected[:, 0].min()), float(projected[:, 0].max())),
                   (float(projected[:, 1].min()), float(projected[:, 1].max())))
    low, high = float(values.min()), float(values.max())
    span = high - low if high > low else 1.0

    with _svg_painter(path, title) as painter:
        _draw_axes(painter, frame, "component 1", "component 2")
        painter.setPen(Qt.NoPen)
        for (x, y), value in zip(projected, values):
            painter.setBrush(QBrush(QColor(*style.scatter_rgb((value - low) / span))))
            painter.drawEllipse(frame.point(x, y), style.SCATTER_POINT_RADIUS, style.SCATTER_POINT_RADIUS)
        painter.setPen(QPen(QColor(style.AXIS_HEX)))
        painter.drawText(QRectF(frame.right + 12, frame.top, style.PLOT_MARGIN_RIGHT - 16, 36),
                         Qt.AlignLeft, f"action {low:.3g} .. {high:.3g}")
    return path
