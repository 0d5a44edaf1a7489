"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np

from artikin import quaternion as quat
from artikin import synth
from artikin.deform import DeformNet, loss_and_grad
from artikin.field import GaussianPrimitive, covariance_of, look_at
from artikin.splat import DEFAULT, project_gaussian


def numeric_projection_jacobian(cam, x, h=1e-6):
    """Central differences of the world-to-pixel map at ``x``."""
    J = np.zeros((2, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        J[:, k] = (cam.project(x + e) - cam.project(x - e)) / (2 * h)
    return J


def random_camera_primitive(rng):
    eye = rng.normal(size=3)
    eye *= rng.uniform(2, 5) / np.linalg.norm(eye)
    cam = look_at(eye, rng.normal(scale=0.2, size=3), rng.uniform(60, 200),
                  rng.uniform(60, 200), 128, 96, up=rng.normal(size=3))
    p = GaussianPrimitive(rng.normal(scale=0.3, size=3), quat.normalize(rng.normal(size=4)),
                          rng.uniform(0.01, 0.5, size=3), [0.5, 0.5, 0.5], 0.9)
    return cam, p


def projection_rel_error(cam, p):
    """Relative error of the analytic screen covariance against finite differences."""
    pg = project_gaussian(p, cam)
    J = numeric_projection_jacobian(cam, p.mu)
    ref = J @ covariance_of(p) @ J.T + DEFAULT.dilation * np.eye(2)
    return float(np.linalg.norm(pg.cov2d - ref) / np.linalg.norm(ref))


def rel_error(a, b, floor=1e-7):
    return abs(a - b) / max(abs(a), abs(b), floor)


def small_regression_problem(seed, n=24, hidden=(8, 6), latent_dim=3):
    """A random small net, latents and a drawer-scene subset to regress onto."""
    rng = np.random.default_rng(seed)
    bundle = synth.generate_scene(synth.preset("drawer", seed=seed, total_gaussians=200,
                                               cameras=synth.CameraRing(count=1)))
    idx = rng.choice(bundle.N, size=n, replace=False)
    canonical = bundle.canonical.subset(idx)
    targets = [st.subset(idx) for st in bundle.states]
    net = DeformNet.init(latent_dim, hidden, rng, output_scale=0.5)
    for b in net.biases:
        b += rng.normal(scale=0.1, size=b.shape)
    latents = rng.normal(scale=0.3, size=(len(targets), latent_dim))
    return net, latents, canonical, targets, rng


def gradient_check(seed, coords=20, h=1e-5):
    """Max relative error between analytic and central-difference gradients at
    ``coords`` random parameter or latent coordinates."""
    net, latents, canonical, targets, rng = small_regression_problem(seed)
    _, grads, g_lat = loss_and_grad(net, latents, canonical, targets)
    tensors = net.params() + [latents]
    analytic = grads + [g_lat]
    sizes = np.array([t.size for t in tensors])
    worst = 0.0
    for _ in range(coords):
        j = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        flat = tensors[j].reshape(-1)
        k = int(rng.integers(flat.size))
        old = flat[k]
        flat[k] = old + h
        up = loss_and_grad(net, latents, canonical, targets, need_grad=False)
        flat[k] = old - h
        down = loss_and_grad(net, latents, canonical, targets, need_grad=False)
        flat[k] = old
        numeric = (up - down) / (2 * h)
        worst = max(worst, rel_error(analytic[j].reshape(-1)[k], numeric))
    return worst


def random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_revolute(rng, n=60, lo_deg=2.0, hi_deg=178.0):
    """Points ``P`` and their images under a random rotation about a random line."""
    from artikin.field import JointModel

    joint = JointModel("revolute", random_unit(rng),
                       np.radians(rng.uniform(lo_deg, hi_deg)), rng.normal(size=3))
    R, t = joint.transform()
    P = rng.normal(size=(n, 3)) * rng.uniform(0.1, 1.0, size=3) + rng.normal(size=3)
    return P, P @ R.T + t, joint


def random_prismatic(rng, n=60):
    from artikin.field import JointModel

    joint = JointModel("prismatic", random_unit(rng), rng.uniform(1e-2, 1.0))
    P = rng.normal(size=(n, 3)) * rng.uniform(0.1, 1.0, size=3) + rng.normal(size=3)
    return P, P + joint.magnitude * joint.axis, joint


def split_tiling_error(p, lam, sign=1.0):
    """Worst deviation of the two children's major-axis segments from an exact tiling
    of the parent's segment, measured in parent axis coordinates."""
    from artikin.refine import major_axis, split_gaussian

    e, smax = major_axis(p)
    e = sign * e
    a, b = split_gaussian(p, lam, e)
    la, lb = lam * smax, (1 - lam) * smax
    ca, cb = (a.mu - p.mu) @ e, (b.mu - p.mu) @ e
    k = int(np.argmax(p.s))
    return max(abs(a.s[k] - la), abs(b.s[k] - lb),
               abs(ca - la / 2 - (smax / 2 - la)), abs(ca + la / 2 - smax / 2),
               abs(cb - lb / 2 + smax / 2), abs(cb + lb / 2 - (smax / 2 - la)),
               float(np.linalg.norm(np.cross(a.mu - p.mu, e))),
               float(np.linalg.norm(np.cross(b.mu - p.mu, e))))
