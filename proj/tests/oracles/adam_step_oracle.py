# Independent single-step optimizer oracle. Recomputes one training step
# (gradients, decoder-column projection, bias-corrected Adam, column
# renormalization, theta floor) in numpy and prints the resulting float32
# parameters; the values are frozen into test_trainer.cpp.
#
# Run: python3 tests/oracles/adam_step_oracle.py
import numpy as np

f32 = np.float32

# fixed instance: n=3 inputs, M=2 latents, batch of 2, training autoencoder
w_enc = np.array([[0.5, -0.25, 0.75], [1.0, 0.5, -0.5]], dtype=f32)  # M x n
b_enc = np.array([0.1, -0.2], dtype=f32)
w_dec = np.array([[1.0, 0.0], [0.0, 0.6], [0.0, 0.8]], dtype=f32)    # n x M, unit columns
b_dec = np.array([0.125, -0.25, 0.5], dtype=f32)
theta = np.array([0.05, 0.7], dtype=f32)
X = np.array([[1.0, 0.5, -0.25], [-0.5, 1.0, 0.75]], dtype=f32)      # B x n

lam, eps_bw = 0.1, 1.0
eta, beta1, beta2, adam_eps = 0.01, 0.0, 0.999, 1e-8

# ---- gradients of the mean per-example loss, float64 math ----
We, be, Wd, bd, th = (a.astype(np.float64) for a in (w_enc, b_enc, w_dec, b_dec, theta))
Xd = X.astype(np.float64)
B = Xd.shape[0]

Xp = Xd - bd                       # pre-encoder bias
Z = Xp @ We.T + be
gate = (Z > th).astype(np.float64)
F = Z * gate
Xhat = F @ Wd.T + bd
R2 = 2.0 * (Xhat - Xd)
Gf = R2 @ Wd
Gz = Gf * gate

g_w_dec = R2.T @ F / B
g_w_enc = Gz.T @ Xp / B
g_b_enc = Gz.mean(axis=0)
g_b_dec = R2.mean(axis=0) - We.T @ g_b_enc
kernel = (np.abs(Z - th) <= eps_bw / 2).astype(np.float64)
g_theta = (-(kernel * (Gf * th + lam)).mean(axis=0)) / eps_bw

print("# gate:", gate, " kernel:", kernel)

# ---- decoder-column projection ----
for j in range(Wd.shape[1]):
    d = Wd[:, j]
    g_w_dec[:, j] -= d * (d @ g_w_dec[:, j])

# ---- Adam, t=1, then renorm + theta floor ----
def adam(p, g):
    m = (1 - beta1) * g                       # zero initial moments
    v = (1 - beta2) * g * g
    mhat = m / (1 - beta1**1)
    vhat = v / (1 - beta2**1)
    return p - eta * mhat / (np.sqrt(vhat) + adam_eps)

We = adam(We, g_w_enc)
be = adam(be, g_b_enc)
Wd = adam(Wd, g_w_dec)
bd = adam(bd, g_b_dec)
th = adam(th, g_theta)

for j in range(Wd.shape[1]):
    Wd[:, j] /= np.linalg.norm(Wd[:, j])
th = np.maximum(th, 1e-9)

def dump(name, a):
    flat = ", ".join(repr(float(x)) for x in np.asarray(a, dtype=f32).ravel())
    print(f"const double {name}[] = {{{flat}}};")

dump("kWEnc", We)
dump("kBEnc", be)
dump("kWDec", Wd)
dump("kBDec", bd)
dump("kTheta", th)
