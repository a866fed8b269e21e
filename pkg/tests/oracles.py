"""Independent references used by the tests."""
import numpy as np
import scipy.optimize

from graphctl.graph import Curve, Trajectory, total_cost
from graphctl.projection import project


def riccati_lq(A, B, Q, R, Qf, x0, T):
    """Finite-horizon LQ optimum through the backward Riccati recursion."""
    P = Qf
    K = [None] * T
    for t in range(T - 1, -1, -1):
        K[t] = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K[t])
    X = np.zeros((T + 1, A.shape[0]))
    U = np.zeros((T, B.shape[1]))
    X[0] = x0
    for t in range(T):
        U[t] = -K[t] @ X[t]
        X[t + 1] = A @ X[t] + B @ U[t]
    return X, U


def batch_lq(A, B, Q, R, Qf, x0, T):
    """Same optimum from a generic quasi-Newton solve over the inputs."""
    nu = B.shape[1]

    def cost(u):
        U = u.reshape(T, nu)
        x = x0.copy()
        c = 0.0
        for t in range(T):
            c += 0.5 * (x @ Q @ x + U[t] @ R @ U[t])
            x = A @ x + B @ U[t]
        return c + 0.5 * x @ Qf @ x

    res = scipy.optimize.minimize(cost, np.zeros(T * nu), method="BFGS", options={"gtol": 1e-12})
    return res.x.reshape(T, nu)


def reduced_directional_derivative(dyn, K, traj: Trajectory, z, v, h=1e-6):
    """Central difference of cost(project(x + h z, u + h v)) with the initial state held fixed."""
    g = dyn.graph
    X, U = traj.stacked_x(), traj.stacked_u()
    Z = np.vstack([z, np.zeros((1, g.nx))])
    x0 = [x[0] for x in traj.x]

    def J(s):
        c = Curve.from_stacked(g, X + s * Z, U + s * v)
        return total_cost(dyn, project(dyn, K, c, x0=x0))

    return (J(h) - J(-h)) / (2 * h)
