"""Regenerate the pinned encoder and codebook fixtures.

    python -m dckd.assets.build_assets
"""
from pathlib import Path

from dckd.data import make_toy_corpus, to_tensor
from dckd.encoder import FrozenEncoder, fit_codebook, save_codebook, save_encoder

HERE = Path(__file__).parent
CODEBOOK_SEED = 9000  # held out: train/eval corpora use other seeds


def main():
    enc = FrozenEncoder(seed=0)
    save_encoder(enc, HERE / "encoder_v1.npz")
    images = to_tensor(make_toy_corpus(CODEBOOK_SEED, 256, 64))
    save_codebook(fit_codebook(enc, images, size=32, seed=0), HERE / "codebook_v1.npz")


if __name__ == "__main__":
    main()
