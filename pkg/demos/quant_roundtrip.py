"""Block-scaled quantization, end to end on a small matrix.

MXFP8 stores one E4M3 code per element plus a power-of-two scale per
32-wide block. NVFP4 packs two E2M1 nibbles per byte with an E4M3 scale
per 16-wide block and a float32 scale per row, so it is cheaper and
coarser. Both are deterministic: same bytes in, same bytes out,
regardless of how rows are batched. That invariance is what makes
quantized rollouts reproducible during training.
"""

import numpy as np

from deskrl.quant import (
    dequantize_mxfp8,
    dequantize_nvfp4_pt,
    gemm_reference_errors,
    quantize_mxfp8,
    quantize_nvfp4_pt,
)


def relative_error(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.abs(x - y).max() / np.abs(x).max())


def main() -> None:
    rng = np.random.Generator(np.random.Philox(3))
    x = (rng.normal(size=(4, 64)) * 3.0).astype(np.float32)

    m = quantize_mxfp8(x)
    x8 = dequantize_mxfp8(m)
    print("MXFP8")
    print(f"  codes {m.codes.shape} uint8, scales {m.scales.shape} (one per 32-col block)")
    print(f"  max relative error {relative_error(x, x8):.4f}")

    n = quantize_nvfp4_pt(x)
    x4 = dequantize_nvfp4_pt(n)
    print("NVFP4")
    print(
        f"  codes {n.codes.shape} packed nibbles, block scales {n.block_scales.shape},"
        f" row scales {n.token_scales.shape}"
    )
    print(f"  max relative error {relative_error(x, x4):.4f}")

    # batch invariance: quantizing two rows alone gives byte-identical output
    sub = quantize_mxfp8(x[1:3])
    assert (sub.codes == m.codes[1:3]).all() and (sub.scales == m.scales[1:3]).all()
    print("\nrows 1..2 quantized alone match the full batch byte for byte")

    # requantizing the dequantized values is a fixpoint
    again = quantize_mxfp8(x8)
    assert (again.codes == m.codes).all()
    print("quantize(dequantize(.)) reproduces the codes exactly")

    errors = gemm_reference_errors()
    print("\ngrouped-GEMM error against the float32 reference:")
    for name, err in sorted(errors.items(), key=lambda kv: kv[1]):
        print(f"  {name:10s} {err:.4f}")
    print("exact < mxfp8 < nvfp4_pt, the ordering the fixtures pin down")


if __name__ == "__main__":
    main()
