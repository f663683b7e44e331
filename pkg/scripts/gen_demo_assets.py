"""Regenerate the bundled demo car assets in src/shadowforge/assets/data."""

from pathlib import Path

from shadowforge.assets import write_demo_assets

if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src" / "shadowforge" / "assets" / "data"
    for name, path in write_demo_assets(out).items():
        print(f"wrote {path}")
