"""Pre-build pilot: freeze DERIVED constants at high precision (mpmath, 50 digits)."""
import mpmath as mp

mp.mp.dps = 50

def Psi(x):
    return mp.mpf('0.5') * mp.erfc(-x / mp.sqrt(2))

c = mp.mpf(3)
fmax = mp.mpf('4.28')

lnPsi3 = mp.log(Psi(c))
print("Psi(3)        =", mp.nstr(Psi(c), 20))
print("lnPsi(3)      =", mp.nstr(lnPsi3, 20))
print("2lnPsi(3)     =", mp.nstr(2*lnPsi3, 20))

def S_unnorm(f):
    return -2 * mp.log(Psi(c - f))

def S_norm(f):
    return -2 * (mp.log(Psi(c - f)) - lnPsi3)

print()
print("S_unnorm(4.28) =", mp.nstr(S_unnorm(fmax), 20))
print("S_norm(4.28)   =", mp.nstr(S_norm(fmax), 20))
print("opacity unnorm =", mp.nstr(1 - mp.exp(-S_unnorm(fmax)), 20))
print("opacity norm   =", mp.nstr(1 - mp.exp(-S_norm(fmax)), 20))

print()
print("footprint table (f, S_norm, S_unnorm):")
for f in ['0.1','0.5','1','2','3','4','4.28']:
    f = mp.mpf(f)
    print(f"  f={mp.nstr(f,4):6}  norm={mp.nstr(S_norm(f), 17):24}  unnorm={mp.nstr(S_unnorm(f), 17)}")

# fast path sweep
print()
A = mp.mpf('0.03279'); P = mp.mpf('3.4')
grid = [mp.mpf('0.05') + (fmax - mp.mpf('0.05')) * i / 2000 for i in range(2001)]
Smax = S_norm(fmax)
worst_pt, worst_pt_f = mp.mpf(0), None
worst_sc, worst_sc_f = mp.mpf(0), None
worst_pt_u = mp.mpf(0)
for f in grid:
    poly = A * f**P
    ex = S_norm(f)
    exu = S_unnorm(f)
    rp = abs(poly - ex) / ex
    rpu = abs(poly - exu) / exu
    rs = abs(poly - ex) / Smax
    if rp > worst_pt: worst_pt, worst_pt_f = rp, f
    if rpu > worst_pt_u: worst_pt_u = rpu
    if rs > worst_sc: worst_sc, worst_sc_f = rs, f
print("fast path vs exact over [0.05, 4.28]:")
print("  max pointwise rel dev (norm)  =", mp.nstr(worst_pt, 8), "at f =", mp.nstr(worst_pt_f, 6))
print("  max pointwise rel dev (unnorm)=", mp.nstr(worst_pt_u, 8))
print("  max scale-rel dev |d|/S(fmax) =", mp.nstr(worst_sc, 8), "at f =", mp.nstr(worst_sc_f, 6))
print("  poly(4.28) =", mp.nstr(A * fmax**P, 12), " rel dev at fmax =",
      mp.nstr(abs(A*fmax**P - Smax)/Smax, 8))

# slab quadrature cross-check: integral of psi(-F)/Psi(-F)*|dF/dt| over slab == S_norm(f)
print()
def slab_integral(f, h, costh):
    half = h / costh
    def dens(t):
        F = f * (1 - abs(t) / half) - c
        x = -F
        return mp.npdf(x) / Psi(x) * (f / h) * costh
    return mp.quad(dens, [-half, 0, half])

for f in ['0.5', '2', '4.28']:
    f = mp.mpf(f)
    q = slab_integral(f, mp.mpf('1e-3'), mp.mpf('0.83'))
    print(f"  slab quad f={mp.nstr(f,4)}: {mp.nstr(q, 17)}  vs S_norm {mp.nstr(S_norm(f), 17)}  diff {mp.nstr(q - S_norm(f), 3)}")

# opacity floor: f below which peak opacity < 1/255
print()
lo, hi = mp.mpf(0), mp.mpf(1)
target = -mp.log(1 - mp.mpf(1)/255)
for _ in range(200):
    mid = (lo + hi) / 2
    if S_norm(mid) < target: lo = mid
    else: hi = mid
print("1/255 opacity floor at f =", mp.nstr(lo, 10), " (rho target", mp.nstr(target, 10), ")")

# oplus example from spec-style sanity: S_norm additive inverse round trip
v = S_norm(mp.mpf(2)) + S_norm(mp.mpf(1))
lo, hi = mp.mpf(0), mp.mpf(20)
for _ in range(200):
    mid = (lo+hi)/2
    if S_norm(mid) < v: lo = mid
    else: hi = mid
print("oplus(2,1) =", mp.nstr(lo, 17), " S_norm =", mp.nstr(v, 12))
