"""Independent reference values for the unit tests (numpy + colorsys)."""
import colorsys
import math

import numpy as np

H = np.array([0.650, 0.704, 0.286])
E = np.array([0.072, 0.990, 0.105])
H /= np.linalg.norm(H)
E /= np.linalg.norm(E)
R = np.cross(H, E)
R /= np.linalg.norm(R)
M = np.stack([H, E, R])


def rgb_to_od(p):
    return [math.log10(255.0 / max(c, 1)) for c in p]


def perturb(row, hue, sat):
    rgb = 10.0 ** (-row)
    h, s, v = colorsys.rgb_to_hsv(*rgb)
    h = (h + hue) % 1.0
    s = min(max(s * sat, 0.0), 1.0)
    rgb = np.array(colorsys.hsv_to_rgb(h, s, v))
    od = np.log10(255.0 / np.maximum(rgb * 255.0, 1.0))
    return od / np.linalg.norm(od)


def softmax(z, t):
    z = np.asarray(z, float) / t
    e = np.exp(z - z.max())
    return e / e.sum()


def main():
    print("rgb_to_od(26,26,26)", rgb_to_od((26, 26, 26)))
    print("rgb_to_od(0,10,255)", rgb_to_od((0, 10, 255)))
    od = 0.5 * H + 0.3 * E
    print("unmix 0.5H+0.3E", np.linalg.solve(M.T, od))
    print("perturb eosin +0.04", perturb(E, 0.04, 1.0))
    print("perturb hema -0.05 sat 0.8", perturb(H, -0.05, 0.8))
    print("softmax (2,0) T=2", softmax([2, 0], 2))
    p, q = softmax([2, 0], 1), softmax([0, 2], 1)
    print("KL", float(np.sum(p * np.log(p / q))))
    v = 0.9 * np.array([1.0, 0.0]) + 0.1 * np.array([0.0, 1.0])
    print("proto update", v / np.linalg.norm(v))
    print("ppp", -math.log(softmax([1.0, 0.0], 1.0)[0]))
    print("std {0.7,0.8}", np.std([0.7, 0.8], ddof=1))


if __name__ == "__main__":
    main()
