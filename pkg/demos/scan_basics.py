"""Walk through the selective state space core.

Runs the same sequence through the sequential recurrence and the chunked
parallel scan, confirms they agree, then shows the one case where the
recurrence collapses to a plain convolution: parameters that ignore the
input.  Run from the repository root:

    python3 demos/scan_basics.py
"""

import numpy as np

from seqscale.seqcore import DTYPE, Rng
from seqscale.ssm import (
    STATE_SIZE,
    make_lti_params,
    make_params,
    ssm_kernel_conv,
    ssm_recurrence,
    ssm_scan,
)


def main() -> None:
    rng = Rng(7)
    channels, length = 8, 600

    # Input-dependent parameters: each step picks its own transition and
    # input matrices, so the only exact evaluation is stepping in order.
    params = make_params(rng.child("params"), channels, STATE_SIZE)
    x = rng.child("x").normal((length, channels)).astype(DTYPE)

    slow = ssm_recurrence(x, params)
    fast = ssm_scan(x, params)
    print(f"recurrence vs. parallel scan, L={length}, C={channels}")
    print(f"  max difference: {np.max(np.abs(slow - fast)):.3e}")

    # The scan processes fixed-size chunks and carries state between them,
    # so the chunk size changes rounding order but not the result.
    for chunk in (64, 256, 1024):
        diff = np.max(np.abs(ssm_scan(x, params, chunk=chunk) - slow))
        print(f"  chunk {chunk:4d}: max difference {diff:.3e}")

    # Freeze the parameters and the recurrence becomes a convolution with
    # a fixed kernel; that equivalence is what attention-free models gave
    # up when they made parameters input-dependent.
    lti = make_lti_params(rng.child("lti"), channels, STATE_SIZE)
    frozen = ssm_recurrence(x, lti)
    kernel = ssm_kernel_conv(x, lti)
    print("constant parameters: recurrence vs. kernel convolution")
    print(f"  max difference: {np.max(np.abs(frozen - kernel)):.3e}")


if __name__ == "__main__":
    main()
