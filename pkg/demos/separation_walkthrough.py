"""Trace one waveform through the time-domain separator.

Encodes a two-tone mixture at one token per millisecond, estimates one
mask per speaker, and decodes each masked representation back to audio.
The model is untrained, so the printed energies only show the plumbing:
lengths are preserved, masks are non-negative, and forcing a pass-through
mask reconstructs the encoder input exactly.

    python3 demos/separation_walkthrough.py
"""

import numpy as np

from seqscale.archs import SAMPLE_RATE, TasNetModel
from seqscale.seqcore import DTYPE, Rng


def main() -> None:
    rng = Rng(21)
    seconds = 2.0
    t = np.arange(int(SAMPLE_RATE * seconds)) / SAMPLE_RATE
    mixture = (np.sin(2 * np.pi * 220 * t) + 0.5 * np.sin(2 * np.pi * 570 * t))
    mixture = mixture.astype(DTYPE)

    model = TasNetModel(64, depth=2, rng=rng.child("model"), n_sources=2)
    encoded = model.encode(mixture)
    print(f"{mixture.shape[0]} samples -> {encoded.shape[0]} tokens "
          f"({encoded.shape[0] / seconds:.0f} tokens per second)")

    masks = model.masks(encoded)
    print(f"masks: shape {masks.shape}, min {masks.min():.3f} (never negative)")

    sources = model.separate(mixture)
    for i, source in enumerate(sources):
        energy = float(np.mean(source.astype(np.float64) ** 2))
        print(f"source {i}: {source.shape[0]} samples, mean power {energy:.4f}")

    # A mask of ones hands the encoder output straight to the decoder;
    # the round trip reproduces the basis reconstruction bit for bit.
    model.masks = lambda feats, **kw: np.stack(
        [np.ones_like(encoded), np.zeros_like(encoded)])
    passthrough = model.separate(mixture)
    direct = model.decode(encoded, mixture.shape[0])
    print("forced pass-through mask equals encode->decode:",
          bool(np.array_equal(passthrough[0], direct)))
    print("forced zero mask is silent:", not passthrough[1].any())


if __name__ == "__main__":
    main()
