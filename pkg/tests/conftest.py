"""Shared test helpers: random boxes, frames and oracle utilities."""

from __future__ import annotations

import numpy as np
import pytest

from scs_lab.geometry import Box7, DetBox, Frame


def random_box(rng: np.random.Generator, class_id: int = 1, center_span: float = 10.0) -> Box7:
    return Box7(
        cx=float(rng.uniform(-center_span, center_span)),
        cy=float(rng.uniform(-center_span, center_span)),
        cz=float(rng.uniform(-2.0, 0.0)),
        length=float(rng.uniform(0.5, 6.0)),
        width=float(rng.uniform(0.4, 3.0)),
        height=float(rng.uniform(0.5, 2.0)),
        heading=float(rng.uniform(-np.pi, np.pi)),
        class_id=class_id,
    )


def random_detbox(rng: np.random.Generator, class_id: int = 1) -> DetBox:
    return DetBox(box=random_box(rng, class_id), score=float(rng.uniform(0.0, 1.0)))


def random_frame(rng: np.random.Generator, n_points: int = 200, n_boxes: int = 3) -> Frame:
    points = np.column_stack(
        [
            rng.uniform(-12, 12, n_points),
            rng.uniform(-12, 12, n_points),
            rng.uniform(-2.2, 0.2, n_points),
            rng.uniform(0, 1, n_points),
        ]
    )
    boxes = tuple(random_box(rng, class_id=int(rng.integers(1, 3))) for _ in range(n_boxes))
    return Frame(frame_id=0, points=points, boxes=boxes, labeled_classes=frozenset({1, 2}))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
