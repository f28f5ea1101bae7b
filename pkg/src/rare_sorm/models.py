"""Built-in SDE models and observables, looked up by name."""

import numpy as np

from .core import Convention, Observable, SdeSystem


def _zeros(x, *tail):
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape[:-1] + tail)


def linear_observable(weights):
    w = np.asarray(weights, dtype=float)
    n = w.size
    return Observable(
        value=lambda x: np.asarray(x) @ w,
        gradient=lambda x: np.broadcast_to(w, np.shape(x)).copy(),
        hessian=lambda x: _zeros(x, n, n),
        name="linear",
    )


def log_square_observable():
    """``f(x) = 1/2 (log x)^2`` in one dimension."""

    def value(x):
        return 0.5 * np.log(np.asarray(x)[..., 0]) ** 2

    def gradient(x):
        x0 = np.asarray(x)[..., 0]
        return (np.log(x0) / x0)[..., None]

    def hessian(x):
        x0 = np.asarray(x)[..., 0]
        return ((1.0 - np.log(x0)) / x0**2)[..., None, None]

    return Observable(value, gradient, hessian, name="log_square")


def geometric_bm(beta=1.0, horizon=1.0, x0=1.0, convention=Convention.ITO):
    """``dX = -beta X dt + sqrt(2 eps) X dW``, observed through ``1/2 (log X)^2``."""
    s2 = np.sqrt(2.0)

    def drift(x):
        return -beta * np.asarray(x, dtype=float)

    def diffusion(x):
        return s2 * np.asarray(x, dtype=float)[..., None]

    def drift_jacobian(x):
        return np.full(np.shape(x)[:-1] + (1, 1), -beta)

    def diffusion_jacobian(x):
        return np.full(np.shape(x)[:-1] + (1, 1, 1), s2)

    system = SdeSystem(
        dim=1,
        drift=drift,
        diffusion=diffusion,
        drift_jacobian=drift_jacobian,
        drift_hessian=lambda x: _zeros(x, 1, 1, 1),
        diffusion_jacobian=diffusion_jacobian,
        diffusion_hessian=lambda x: _zeros(x, 1, 1, 1, 1),
        x0=[x0],
        horizon=horizon,
        convention=convention,
        name="geometric_bm" if Convention(convention) is Convention.ITO else "strato_gbm",
        params={"beta": beta, "horizon": horizon, "x0": x0},
    )
    return system, log_square_observable()


def strato_gbm(beta=1.0, horizon=1.0, x0=1.0):
    """Geometric BM with the noise read in the Stratonovich sense."""
    return geometric_bm(beta, horizon, x0, convention=Convention.STRATONOVICH)


def additive_ou(kappa=1.0, sigma=1.0, horizon=1.0, x0=0.0):
    """1D Ornstein-Uhlenbeck ``dX = -kappa X dt + sqrt(eps) sigma dW``, ``f(x) = x``."""

    def drift(x):
        return -kappa * np.asarray(x, dtype=float)

    system = SdeSystem(
        dim=1,
        drift=drift,
        diffusion=lambda x: np.full(np.shape(x)[:-1] + (1, 1), float(sigma)),
        drift_jacobian=lambda x: np.full(np.shape(x)[:-1] + (1, 1), -float(kappa)),
        drift_hessian=lambda x: _zeros(x, 1, 1, 1),
        diffusion_jacobian=lambda x: _zeros(x, 1, 1, 1),
        diffusion_hessian=lambda x: _zeros(x, 1, 1, 1, 1),
        x0=[x0],
        horizon=horizon,
        name="additive_ou",
        params={"kappa": kappa, "sigma": sigma, "horizon": horizon, "x0": x0},
    )
    return system, linear_observable([1.0])


def additive_cubic(kappa=1.0, sigma=1.0, horizon=1.0, x0=0.0):
    """Additive noise with nonlinear drift ``b(x) = -kappa x - x^3``, ``f(x) = x``."""

    def drift(x):
        x = np.asarray(x, dtype=float)
        return -kappa * x - x**3

    def drift_jacobian(x):
        x = np.asarray(x, dtype=float)
        return (-kappa - 3 * x**2)[..., None]

    def drift_hessian(x):
        x = np.asarray(x, dtype=float)
        return (-6 * x)[..., None, None]

    system = SdeSystem(
        dim=1,
        drift=drift,
        diffusion=lambda x: np.full(np.shape(x)[:-1] + (1, 1), float(sigma)),
        drift_jacobian=drift_jacobian,
        drift_hessian=drift_hessian,
        diffusion_jacobian=lambda x: _zeros(x, 1, 1, 1),
        diffusion_hessian=lambda x: _zeros(x, 1, 1, 1, 1),
        x0=[x0],
        horizon=horizon,
        name="additive_cubic",
        params={"kappa": kappa, "sigma": sigma, "horizon": horizon, "x0": x0},
    )
    return system, linear_observable([1.0])


def predator_prey_fixed_point(alpha, beta, gamma, delta):
    """Stationary point of the Lotka-Volterra drift with migration."""
    # alpha x - gamma y + 2 delta = 0  =>  y = (alpha x + 2 delta) / gamma
    a = -beta * alpha / gamma
    b = alpha - 2 * beta * delta / gamma
    c = delta
    x = (-b - np.sqrt(b * b - 4 * a * c)) / (2 * a)
    return np.array([x, (alpha * x + 2 * delta) / gamma])


def predator_prey(alpha=1.0, beta=5.0, gamma=1.0, delta=0.1, horizon=10.0):
    """Stochastic Lotka-Volterra model with demographic noise; observes the prey."""

    def split(x):
        x = np.asarray(x, dtype=float)
        return x[..., 0], x[..., 1]

    def drift(x):
        u, v = split(x)
        return np.stack([-beta * u * v + alpha * u + delta,
                         beta * u * v - gamma * v + delta], axis=-1)

    def drift_jacobian(x):
        u, v = split(x)
        return np.stack([np.stack([-beta * v + alpha, -beta * u], -1),
                         np.stack([beta * v, beta * u - gamma], -1)], -2)

    def drift_hessian(x):
        u, _ = split(x)
        out = np.zeros(u.shape + (2, 2, 2))
        out[..., 0, 0, 1] = out[..., 0, 1, 0] = -beta
        out[..., 1, 0, 1] = out[..., 1, 1, 0] = beta
        return out

    def rates(x):
        u, v = split(x)
        g1 = beta * u * v + alpha * u + delta
        g2 = beta * u * v + gamma * v + delta
        dg1 = np.stack([beta * v + alpha, beta * u], -1)
        dg2 = np.stack([beta * v, beta * u + gamma], -1)
        return g1, g2, dg1, dg2

    def diffusion(x):
        g1, g2, _, _ = rates(x)
        out = np.zeros(g1.shape + (2, 2))
        out[..., 0, 0] = np.sqrt(g1)
        out[..., 1, 1] = np.sqrt(g2)
        return out

    def diffusion_jacobian(x):
        g1, g2, dg1, dg2 = rates(x)
        out = np.zeros(g1.shape + (2, 2, 2))
        out[..., 0, 0, :] = dg1 / (2 * np.sqrt(g1))[..., None]
        out[..., 1, 1, :] = dg2 / (2 * np.sqrt(g2))[..., None]
        return out

    def diffusion_hessian(x):
        g1, g2, dg1, dg2 = rates(x)
        ddg = np.array([[0.0, beta], [beta, 0.0]])
        out = np.zeros(g1.shape + (2, 2, 2, 2))
        for idx, g, dg in ((0, g1, dg1), (1, g2, dg2)):
            sq = np.sqrt(g)[..., None, None]
            outer = dg[..., :, None] * dg[..., None, :]
            out[..., idx, idx, :, :] = ddg / (2 * sq) - outer / (4 * sq**3)
        return out

    system = SdeSystem(
        dim=2,
        drift=drift,
        diffusion=diffusion,
        drift_jacobian=drift_jacobian,
        drift_hessian=drift_hessian,
        diffusion_jacobian=diffusion_jacobian,
        diffusion_hessian=diffusion_hessian,
        x0=predator_prey_fixed_point(alpha, beta, gamma, delta),
        horizon=horizon,
        name="predator_prey",
        params={"alpha": alpha, "beta": beta, "gamma": gamma, "delta": delta,
                "horizon": horizon},
    )
    return system, linear_observable([1.0, 0.0])


REGISTRY = {
    "geometric_bm": geometric_bm,
    "strato_gbm": strato_gbm,
    "predator_prey": predator_prey,
    "additive_ou": additive_ou,
    "additive_cubic": additive_cubic,
}


def build_model(name, **params):
    """Return ``(system, observable)`` for a registered model name."""
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(REGISTRY)}") from None
    return factory(**params)
