"""Built-in glyph bitmaps (1 = ink) for synthetic documents and models."""
import numpy as np

_ART = {
    "a": """
............
............
............
...######...
..##....##..
.........#..
...#######..
..##.....#..
..#.....##..
..##...###..
...####..##.
............
""",
    "b": """
..##........
..##........
..##........
..##.####...
..###...##..
..##.....##.
..##.....##.
..##.....##.
..##.....##.
..###...##..
..##.####...
............
""",
    "e": """
............
............
............
...#####....
..##...##...
.##.....##..
.#########..
.##.........
.##.........
..##....##..
...######...
............
""",
    "s": """
............
............
............
...######...
..##....##..
..##........
...#####....
.......##...
........##..
..##....##..
...######...
............
""",
    "y": """
............
............
............
.##......##.
..##....##..
..##....##..
...##..##...
....####....
.....##.....
....##......
..###.......
.##.........
""",
    "k": """
.##.........
.##.........
.##.....##..
.##....##...
.##...##....
.##.##......
.####.......
.##.##......
.##..##.....
.##...##....
.##....###..
............
""",
    "x": """
............
............
............
.##.....##..
..##...##...
...##.##....
....###.....
...##.##....
..##...##...
.##.....##..
##.......##.
............
""",
}

NAMES = tuple(_ART)


def glyph(name):
    rows = [r for r in _ART[name].strip("\n").splitlines()]
    return np.array([[ch == "#" for ch in r] for r in rows], dtype=bool)


def glyph_set(names=("a", "b", "e", "s", "y")):
    return [glyph(n) for n in names]


def scale_nearest(mask, shape):
    """Nearest-neighbour resize of a boolean bitmap."""
    r = (np.arange(shape[0]) * mask.shape[0] // shape[0])
    c = (np.arange(shape[1]) * mask.shape[1] // shape[1])
    return mask[r[:, None], c[None, :]]
