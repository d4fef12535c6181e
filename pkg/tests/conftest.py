"""Shared fixtures: a small handcrafted dataset and TSV writing helpers."""

import numpy as np
import pytest

from framerec.data import Dataset


@pytest.fixture
def toy_dataset() -> Dataset:
    """3 users, 3 items with 2/1/3 frames, 2-d features, 6 ratings.

    Feature rows are chosen so hand-computed embeddings come out in small
    fractions: item 0 owns frames (1,0) and (0,1), so its mean under an
    identity projection is (0.5, 0.5).
    """
    return Dataset(
        num_users=3,
        num_items=3,
        num_frames=6,
        feature_dim=2,
        ratings=frozenset({(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 2)}),
        frames_of_item=((0, 1), (2,), (3, 4, 5)),
        frame_parent=np.array([0, 0, 1, 2, 2, 2], dtype=np.int64),
        frame_features=np.array(
            [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.0], [0.0, 2.0], [1.0, 1.0]]
        ),
        user_ids=("u0", "u1", "u2"),
        item_ids=("i0", "i1", "i2"),
        frame_ids=("f0", "f1", "f2", "f3", "f4", "f5"),
    )


def write_dataset_dir(path, ratings, frames, features, frame_likes=None):
    """Write raw TSV texts into a directory and return it."""
    path.mkdir(parents=True, exist_ok=True)
    (path / "ratings.tsv").write_text(ratings, encoding="utf-8")
    (path / "frames.tsv").write_text(frames, encoding="utf-8")
    (path / "features.tsv").write_text(features, encoding="utf-8")
    if frame_likes is not None:
        (path / "frame_likes.tsv").write_text(frame_likes, encoding="utf-8")
    return path


TOY_RATINGS = "a\tx\na\ty\nb\ty\nb\tz\nc\tx\nc\tz\n"
TOY_FRAMES = "fx1\tx\nfx2\tx\nfy1\ty\nfz1\tz\nfz2\tz\nfz3\tz\n"
TOY_FEATURES = (
    "fx1\t1.0 0.0\n"
    "fx2\t0.0 1.0\n"
    "fy1\t1.0 1.0\n"
    "fz1\t2.0 0.0\n"
    "fz2\t0.0 2.0\n"
    "fz3\t1.0 1.0\n"
)
