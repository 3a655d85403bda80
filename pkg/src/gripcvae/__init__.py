"""Joint-configuration estimation for multifingered grippers from point clouds."""

from importlib import resources

from .hand import HandModel, JointConfig, load_hand, parse_hand
from .version import __version__


def asset_path(name: str):
    """Path to a packaged asset, e.g. 'al16_synth.urdf'."""
    return resources.files("gripcvae.assets").joinpath(name)


def load_builtin_hand(name: str = "al16-synth") -> HandModel:
    stem = name.replace("-", "_")
    urdf = asset_path(f"{stem}.urdf")
    ann = asset_path(f"{stem}.hand.json")
    return parse_hand(urdf.read_text(), ann.read_text())
