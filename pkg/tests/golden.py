"""Reference per-segment (r_hat, z_hat, r_him) triples, printed to three decimals."""

import numpy as np

HEADLINE = np.array(
    [
        (0.069, 0.127, 0.039),
        (0.118, 0.392, 0.205),
        (0.132, 0.286, 0.167),
        (0.681, 0.195, 0.589),
    ]
)

CASES = {
    "A": np.array([(0.030, 0.220, 0.041), (0.092, 0.291, 0.168), (0.045, 0.240, 0.068), (0.016, 0.110, 0.011), (0.818, 0.139, 0.712)]),
    "B": np.array([(0.415, 0.125, 0.275), (0.209, 0.299, 0.332), (0.135, 0.227, 0.164), (0.113, 0.120, 0.073), (0.128, 0.229, 0.156)]),
    "C": np.array([(0.027, 0.122, 0.022), (0.065, 0.146, 0.064), (0.063, 0.389, 0.165), (0.013, 0.214, 0.018), (0.832, 0.129, 0.730)]),
    "D": np.array([(0.039, 0.209, 0.051), (0.063, 0.249, 0.097), (0.058, 0.409, 0.147), (0.841, 0.134, 0.705)]),
}

# printed values carry three decimals; sums are compared with this float slack on top
PRINT_SLACK = 1e-9
