"""Seeded synthetic assets standing in for a licensed face basis and CelebA.

``write_fixture`` lays out a directory usable by every CLI subcommand::

    basis.bin               synthetic morphable basis
    list_attr_celeba.txt    10-row attribute table
    params/<stem>.json      one parameter file per attribute row
    query.json              an input face that is not in the table
"""

from pathlib import Path

import numpy as np

from .morphable import (
    N_EXP,
    N_ID,
    N_TEX,
    ParamVector,
    save_basis,
    save_params,
    synthetic_basis,
)
from .protodb import DEFAULT_EXCLUDE, DEFAULT_INCLUDE
from .renderer import SH_Y00

CELEBA_ATTRIBUTES = (
    "5_o_Clock_Shadow", "Arched_Eyebrows", "Attractive", "Bags_Under_Eyes",
    "Bald", "Bangs", "Big_Lips", "Big_Nose", "Black_Hair", "Blond_Hair",
    "Blurry", "Brown_Hair", "Bushy_Eyebrows", "Chubby", "Double_Chin",
    "Eyeglasses", "Goatee", "Gray_Hair", "Heavy_Makeup", "High_Cheekbones",
    "Male", "Mouth_Slightly_Open", "Mustache", "Narrow_Eyes", "No_Beard",
    "Oval_Face", "Pale_Skin", "Pointy_Nose", "Receding_Hairline", "Rosy_Cheeks",
    "Sideburns", "Smiling", "Straight_Hair", "Wavy_Hair", "Wearing_Earrings",
    "Wearing_Hat", "Wearing_Lipstick", "Wearing_Necklace", "Wearing_Necktie",
    "Young",
)

# per-row overrides on top of a passing row (include +1, exclude -1)
FIXTURE_ROWS = (
    ("000001.jpg", {}),
    ("000002.jpg", {"Eyeglasses": 1}),
    ("000003.jpg", {"Attractive": -1}),
    ("000004.jpg", {"Young": -1}),
    ("000005.jpg", {"Male": 1, "Smiling": 1}),
    ("000006.jpg", {"Wearing_Hat": 1}),
    ("000007.jpg", {"Bangs": 1}),
    ("000008.jpg", {"Bald": 1, "Big_Nose": 1}),
    ("000009.jpg", {"Blurry": 1}),
    ("000010.jpg", {"Heavy_Makeup": 1}),
)

BASIS_GRID = (40, 40)
CAMERA_DISTANCE = 12.0


def fixture_attribute_text(seed=0):
    """CelebA-layout text for the 10 fixture rows.

    Attributes outside the curation lists are random but never change the
    selection, which is always rows 1, 5, 7 and 10.
    """
    rng = np.random.default_rng(seed)
    lines = [str(len(FIXTURE_ROWS)), " ".join(CELEBA_ATTRIBUTES)]
    for fname, overrides in FIXTURE_ROWS:
        row = {name: int(rng.choice((-1, 1))) for name in CELEBA_ATTRIBUTES}
        row.update({name: 1 for name in DEFAULT_INCLUDE})
        row.update({name: -1 for name in DEFAULT_EXCLUDE})
        row.update(overrides)
        flags = " ".join(f"{row[name]:2d}" for name in CELEBA_ATTRIBUTES)
        lines.append(f"{fname} {flags}")
    return "\n".join(lines) + "\n"


def random_params(rng, pose_jitter=0.25):
    pose = np.concatenate([
        rng.uniform(-pose_jitter, pose_jitter, size=3),
        [rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), CAMERA_DISTANCE],
    ])
    gamma = np.zeros(9)
    gamma[0] = 1.0 / SH_Y00
    gamma[1:4] = rng.normal(scale=0.3, size=3)
    return ParamVector(
        alpha=rng.normal(size=N_ID),
        beta=rng.normal(scale=0.5, size=N_EXP),
        delta=rng.normal(size=N_TEX),
        pose=pose,
        gamma=gamma,
    )


def fixture_basis(seed=0):
    return synthetic_basis(*BASIS_GRID, seed=seed)


def write_fixture(out_dir, seed=0):
    out_dir = Path(out_dir)
    (out_dir / "params").mkdir(parents=True, exist_ok=True)
    save_basis(fixture_basis(seed), out_dir / "basis.bin")
    (out_dir / "list_attr_celeba.txt").write_text(fixture_attribute_text(seed), encoding="utf-8")
    rng = np.random.default_rng([seed, 1])
    for fname, _ in FIXTURE_ROWS:
        stem = Path(fname).stem
        save_params(random_params(rng), out_dir / "params" / f"{stem}.json", face_id=fname)
    save_params(random_params(rng), out_dir / "query.json", face_id="query")
    return out_dir
