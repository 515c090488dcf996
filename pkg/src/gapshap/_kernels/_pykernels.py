"""Pure-Python reference kernels.

Every routine here has a twin in ``_ckernels.pyx`` with the same operation
order, so both backends produce bit-identical floats. Keep them in sync.
"""

import math

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
STREAM_ENV = 0x5851F42D4C957F2D
STREAM_ACT = 0x14057B7EF767814F
TWO_PI = 2.0 * math.pi
INV_2_53 = 1.0 / 9007199254740992.0

TASK_GRID = 0
TASK_PEND = 1

GRID_ACTIONS = 4
PEND_ACTIONS = 5
GRID_DX = (0, 1, 0, -1)
GRID_DY = (1, 0, -1, 0)
CELL_GOAL = 1
CELL_PIT = 2

PEND_MAX_SPEED = 8.0
N_TILINGS = 8
N_TILES = 8
TILING_SIDE = N_TILES + 1
TILING_SIZE = TILING_SIDE * TILING_SIDE
TILE_W_THETA = TWO_PI / N_TILES
TILE_W_OMEGA = 2.0 * PEND_MAX_SPEED / N_TILES

PPO_LAMBDA = 0.95
PPO_EPOCHS = 4
PPO_VF_COEF = 0.5
A2C_STEPS = 5
Q_BATCH = 32
Q_LEARN_START = 100
Q_EPSILON = 0.1
REFERENCE_BUDGET = 100000.0
SAC_BUFFER = 1000000.0

BACKEND = "python"


# -- random numbers ---------------------------------------------------------

def mix64(z):
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_state(seed, stream):
    return mix64((seed & MASK64) ^ stream)


def _next(state):
    state = (state + GOLDEN) & MASK64
    return state, (mix64(state) >> 11) * INV_2_53


def uniforms(state, n):
    """Draw ``n`` uniforms in [0, 1); returns (new_state, list)."""
    out = []
    for _ in range(n):
        state, u = _next(state)
        out.append(u)
    return state, out


# -- environments -------------------------------------------------------------

def n_features(task):
    if task == TASK_GRID:
        raise ValueError("grid feature count depends on the layout")
    return N_TILINGS * TILING_SIZE


def grid_step(cells, width, height, phys, pos, action, state):
    """Advance GridSlip one step; returns (pos, reward, terminal, state)."""
    state, u1 = _next(state)
    state, u2 = _next(state)
    d = action
    if u1 < phys[0]:
        p_cw = 0.5 + phys[1]
        if p_cw < 0.0:
            p_cw = 0.0
        elif p_cw > 1.0:
            p_cw = 1.0
        if u2 < p_cw:
            d = (action + 1) % 4
        else:
            d = (action + 3) % 4
    x = pos % width + GRID_DX[d]
    y = pos // width + GRID_DY[d]
    if 0 <= x < width and 0 <= y < height:
        pos = y * width + x
    reward = phys[2]
    cell = cells[pos]
    terminal = False
    if cell == CELL_GOAL:
        reward = reward + 1.0
        terminal = True
    elif cell == CELL_PIT:
        reward = reward - 1.0
        terminal = True
    return pos, reward, terminal, state


def pend_reset(state):
    state, u = _next(state)
    return math.pi - 0.1 + 0.2 * u, state


def _wrap(theta):
    theta = math.fmod(theta, TWO_PI)
    if theta < 0.0:
        theta = theta + TWO_PI
    if theta >= TWO_PI:
        theta = 0.0
    return theta


def pend_step(phys, integrator, theta, omega, action):
    """Advance PendulumLite one step; returns (theta, omega, reward)."""
    gravity = phys[0]
    damping = phys[1]
    mass = phys[2]
    dt = phys[3]
    u = float(action - 2)
    err = theta
    if err > math.pi:
        err = TWO_PI - theta
    reward = -(err * err + 0.1 * omega * omega + 0.001 * u * u)
    if phys[4] == 0.0:
        fric = damping * omega
    else:
        fric = damping * math.tanh(omega / 0.05)
    acc = (mass * gravity * math.sin(theta) + u - fric) / mass
    if integrator == 0:
        omega = omega + dt * acc
        if omega > PEND_MAX_SPEED:
            omega = PEND_MAX_SPEED
        elif omega < -PEND_MAX_SPEED:
            omega = -PEND_MAX_SPEED
        theta = theta + dt * omega
    else:
        theta = theta + dt * omega
        omega = omega + dt * acc
        if omega > PEND_MAX_SPEED:
            omega = PEND_MAX_SPEED
        elif omega < -PEND_MAX_SPEED:
            omega = -PEND_MAX_SPEED
    return _wrap(theta), omega, reward


def pend_features(theta, omega, out):
    """Fill ``out`` (length N_TILINGS) with active tile indices."""
    w = omega + PEND_MAX_SPEED
    for k in range(N_TILINGS):
        off_t = ((k * 1) % N_TILINGS) / N_TILINGS * TILE_W_THETA
        off_w = ((k * 3) % N_TILINGS) / N_TILINGS * TILE_W_OMEGA
        ix = int((theta + off_t) / TILE_W_THETA)
        iy = int((w + off_w) / TILE_W_OMEGA)
        out[k] = k * TILING_SIZE + ix * TILING_SIDE + iy


class _Env:
    """Mutable simulation state shared by the training and evaluation loops."""

    def __init__(self, task, cells, width, height, start, phys, integrator, horizon):
        self.task = task
        self.cells = list(cells)
        self.width = width
        self.height = height
        self.start = start
        self.phys = [float(v) for v in phys]
        self.integrator = integrator
        self.horizon = horizon
        if task == TASK_GRID:
            self.n_act = GRID_ACTIONS
            self.n_active = 1
            self.n_feat = width * height
        else:
            self.n_act = PEND_ACTIONS
            self.n_active = N_TILINGS
            self.n_feat = N_TILINGS * TILING_SIZE
        self.pos = start
        self.theta = 0.0
        self.omega = 0.0
        self.rng = 0
        self.t = 0

    def reset(self, seed):
        self.rng = stream_state(seed, STREAM_ENV)
        self.t = 0
        if self.task == TASK_GRID:
            self.pos = self.start
        else:
            self.theta, self.rng = pend_reset(self.rng)
            self.omega = 0.0

    def features(self, out):
        if self.task == TASK_GRID:
            out[0] = self.pos
        else:
            pend_features(self.theta, self.omega, out)

    def step(self, action):
        self.t += 1
        if self.task == TASK_GRID:
            self.pos, r, term, self.rng = grid_step(
                self.cells, self.width, self.height, self.phys, self.pos, action, self.rng)
        else:
            self.theta, self.omega, r = pend_step(
                self.phys, self.integrator, self.theta, self.omega, action)
            term = False
        return r, term


# -- policy helpers -------------------------------------------------------------

def _scores(table, feats, k, na, out):
    for b in range(na):
        out[b] = 0.0
    for j in range(k):
        base = feats[j] * na
        for b in range(na):
            out[b] = out[b] + table[base + b]


def _argmax_tiebreak(vals, na, state):
    best = vals[0]
    count = 1
    for b in range(1, na):
        v = vals[b]
        if v > best:
            best = v
            count = 1
        elif v == best:
            count += 1
    if count == 1:
        for b in range(na):
            if vals[b] == best:
                return b, state
    state, u = _next(state)
    pick = int(u * count)
    for b in range(na):
        if vals[b] == best:
            if pick == 0:
                return b, state
            pick -= 1
    return na - 1, state


def _softmax(vals, na, inv_temp, out):
    m = vals[0] * inv_temp
    for b in range(1, na):
        if vals[b] * inv_temp > m:
            m = vals[b] * inv_temp
    total = 0.0
    for b in range(na):
        e = math.exp(vals[b] * inv_temp - m)
        out[b] = e
        total = total + e
    for b in range(na):
        out[b] = out[b] / total


def _sample(probs, na, state):
    state, u = _next(state)
    acc = 0.0
    for b in range(na - 1):
        acc = acc + probs[b]
        if u < acc:
            return b, state
    return na - 1, state


def _all_finite(arr):
    for v in arr:
        if not math.isfinite(v):
            return False
    return True


# -- training -------------------------------------------------------------------

class _Episodes:
    def __init__(self, env, seed):
        self.env = env
        self.seed = seed
        self.index = 0
        self.ret = 0.0
        self.ends = []
        self.returns = []

    def start(self):
        ep_seed = mix64((self.seed + GOLDEN * (self.index + 1)) & MASK64)
        self.env.reset(ep_seed)
        self.ret = 0.0

    def finish(self, step):
        self.ends.append(step)
        self.returns.append(self.ret)
        self.index += 1
        self.start()


def _train_pg(env, algo, hp, seed, total):
    na, k, nf = env.n_act, env.n_active, env.n_feat
    lr, gamma = hp[0], hp[1]
    if algo == 0:
        clip = hp[2]
        n_steps = int(hp[3])
        lam = PPO_LAMBDA
        vf = PPO_VF_COEF
    else:
        clip = 0.0
        n_steps = A2C_STEPS
        lam = hp[2]
        vf = hp[3]
    step = lr / k
    W = [0.0] * (nf * na)
    V = [0.0] * nf
    agent = stream_state(seed, STREAM_ACT)
    eps = _Episodes(env, seed)
    eps.start()

    feats = [0] * (n_steps * k)
    acts = [0] * n_steps
    rews = [0.0] * n_steps
    vals = [0.0] * n_steps
    nextv = [0.0] * n_steps
    cont = [0.0] * n_steps
    pold = [0.0] * (n_steps * na)
    adv = [0.0] * n_steps
    rets = [0.0] * n_steps
    order = list(range(n_steps))
    cur = [0] * k
    sc = [0.0] * na
    probs = [0.0] * na

    steps = 0
    while steps < total:
        T = n_steps
        if total - steps < T:
            T = total - steps
        for t in range(T):
            env.features(cur)
            for j in range(k):
                feats[t * k + j] = cur[j]
            _scores(W, cur, k, na, sc)
            _softmax(sc, na, 1.0, probs)
            a, agent = _sample(probs, na, agent)
            for b in range(na):
                pold[t * na + b] = probs[b]
            v = 0.0
            for j in range(k):
                v = v + V[cur[j]]
            vals[t] = v
            acts[t] = a
            r, term = env.step(a)
            steps += 1
            eps.ret = eps.ret + r
            rews[t] = r
            if term:
                nextv[t] = 0.0
                cont[t] = 0.0
                eps.finish(steps)
            else:
                env.features(cur)
                v2 = 0.0
                for j in range(k):
                    v2 = v2 + V[cur[j]]
                nextv[t] = v2
                if env.t >= env.horizon:
                    cont[t] = 0.0
                    eps.finish(steps)
                else:
                    cont[t] = 1.0
        last = 0.0
        for t in range(T - 1, -1, -1):
            delta = rews[t] + gamma * nextv[t] - vals[t]
            last = delta + gamma * lam * cont[t] * last
            adv[t] = last
            rets[t] = last + vals[t]
        if algo == 0:
            if T > 1:
                mean = 0.0
                for t in range(T):
                    mean = mean + adv[t]
                mean = mean / T
                var = 0.0
                for t in range(T):
                    d = adv[t] - mean
                    var = var + d * d
                std = math.sqrt(var / T)
                for t in range(T):
                    adv[t] = (adv[t] - mean) / (std + 1e-8)
            for _ in range(PPO_EPOCHS):
                for t in range(T):
                    order[t] = t
                for t in range(T - 1, 0, -1):
                    agent, u = _next(agent)
                    j = int(u * (t + 1))
                    order[t], order[j] = order[j], order[t]
                for idx in range(T):
                    t = order[idx]
                    a = acts[t]
                    for j in range(k):
                        cur[j] = feats[t * k + j]
                    _scores(W, cur, k, na, sc)
                    _softmax(sc, na, 1.0, probs)
                    p_old = pold[t * na + a]
                    if p_old < 1e-300:
                        p_old = 1e-300
                    ratio = probs[a] / p_old
                    A = adv[t]
                    if not ((A > 0.0 and ratio > 1.0 + clip) or (A < 0.0 and ratio < 1.0 - clip)):
                        g = step * A * ratio
                        for j in range(k):
                            base = cur[j] * na
                            for b in range(na):
                                ind = 1.0 if b == a else 0.0
                                W[base + b] = W[base + b] + g * (ind - probs[b])
                    v = 0.0
                    for j in range(k):
                        v = v + V[cur[j]]
                    dv = step * vf * (rets[t] - v)
                    for j in range(k):
                        V[cur[j]] = V[cur[j]] + dv
        else:
            for t in range(T):
                a = acts[t]
                g = step * adv[t] / T
                dv = step * vf * (rets[t] - vals[t]) / T
                for j in range(k):
                    f = feats[t * k + j]
                    base = f * na
                    for b in range(na):
                        ind = 1.0 if b == a else 0.0
                        W[base + b] = W[base + b] + g * (ind - pold[t * na + b])
                    V[f] = V[f] + dv
    return W, V, eps


def _soft_value(table, feats, k, na, alpha, sc):
    _scores(table, feats, k, na, sc)
    m = sc[0]
    for b in range(1, na):
        if sc[b] > m:
            m = sc[b]
    total = 0.0
    for b in range(na):
        total = total + math.exp((sc[b] - m) / alpha)
    return m + alpha * math.log(total)


def _train_q(env, algo, hp, seed, total):
    na, k, nf = env.n_act, env.n_active, env.n_feat
    lr, gamma, tau = hp[0], hp[1], hp[2]
    if algo == 2:
        buffer_size = hp[3]
        alpha = 0.0
    else:
        buffer_size = SAC_BUFFER
        alpha = hp[3]
    cap = int(buffer_size * total / REFERENCE_BUDGET + 0.5)
    if cap < Q_BATCH:
        cap = Q_BATCH
    if cap > total:
        cap = total
    step = lr / k
    keep = 1.0 - tau
    n = nf * na
    Q = [0.0] * n
    Qt = [0.0] * n
    agent = stream_state(seed, STREAM_ACT)
    eps = _Episodes(env, seed)
    eps.start()

    bs = [0] * (cap * k)
    bs2 = [0] * (cap * k)
    ba = [0] * cap
    br = [0.0] * cap
    bt = [0] * cap
    size = 0
    head = 0
    cur = [0] * k
    nxt = [0] * k
    sc = [0.0] * na
    probs = [0.0] * na
    inv_alpha = 1.0 / alpha if alpha > 0.0 else 0.0

    steps = 0
    while steps < total:
        env.features(cur)
        _scores(Q, cur, k, na, sc)
        if algo == 2:
            agent, u = _next(agent)
            if u < Q_EPSILON:
                agent, u = _next(agent)
                a = int(u * na)
            else:
                a, agent = _argmax_tiebreak(sc, na, agent)
        else:
            _softmax(sc, na, inv_alpha, probs)
            a, agent = _sample(probs, na, agent)
        r, term = env.step(a)
        steps += 1
        eps.ret = eps.ret + r
        env.features(nxt)
        for j in range(k):
            bs[head * k + j] = cur[j]
            bs2[head * k + j] = nxt[j]
        ba[head] = a
        br[head] = r
        bt[head] = 1 if term else 0
        head += 1
        if head == cap:
            head = 0
        if size < cap:
            size += 1
        if term or env.t >= env.horizon:
            eps.finish(steps)
        if steps >= Q_LEARN_START:
            for _ in range(Q_BATCH):
                agent, u = _next(agent)
                i = int(u * size)
                if bt[i]:
                    y = br[i]
                else:
                    for j in range(k):
                        nxt[j] = bs2[i * k + j]
                    if algo == 2:
                        _scores(Qt, nxt, k, na, sc)
                        m = sc[0]
                        for b in range(1, na):
                            if sc[b] > m:
                                m = sc[b]
                    else:
                        m = _soft_value(Qt, nxt, k, na, alpha, sc)
                    y = br[i] + gamma * m
                a = ba[i]
                q = 0.0
                for j in range(k):
                    q = q + Q[bs[i * k + j] * na + a]
                d = step * (y - q)
                for j in range(k):
                    f = bs[i * k + j] * na + a
                    Q[f] = Q[f] + d
            Qt = [qt * keep + tau * q for qt, q in zip(Qt, Q)]
    return Q, Qt, eps


def train_run(task, cells, width, height, start, phys, integrator, horizon,
              algo, hp, seed, total_steps):
    """Train one agent; returns (table, aux, ep_ends, ep_returns, diverged)."""
    env = _Env(task, cells, width, height, start, phys, integrator, horizon)
    hp = [float(v) for v in hp]
    seed = int(seed) & MASK64
    total = int(total_steps)
    if algo in (0, 1):
        table, aux, eps = _train_pg(env, algo, hp, seed, total)
    elif algo in (2, 3):
        table, aux, eps = _train_q(env, algo, hp, seed, total)
    else:
        raise ValueError(f"unknown algorithm id {algo}")
    diverged = not (_all_finite(table) and _all_finite(aux))
    return (
        np.array(table, dtype=np.float64).reshape(env.n_feat, env.n_act),
        np.array(aux, dtype=np.float64),
        np.array(eps.ends, dtype=np.int64),
        np.array(eps.returns, dtype=np.float64),
        diverged,
    )


def evaluate_run(task, cells, width, height, start, phys, integrator, horizon,
                 table, episodes, eval_seed):
    """Undiscounted returns of the mode-action policy, one per episode."""
    env = _Env(task, cells, width, height, start, phys, integrator, horizon)
    na, k = env.n_act, env.n_active
    flat = [float(v) for v in np.asarray(table, dtype=np.float64).ravel()]
    cur = [0] * k
    sc = [0.0] * na
    out = np.empty(episodes, dtype=np.float64)
    for e in range(episodes):
        seed = (int(eval_seed) + e) & MASK64
        env.reset(seed)
        act = stream_state(seed, STREAM_ACT)
        ret = 0.0
        while True:
            env.features(cur)
            _scores(flat, cur, k, na, sc)
            a, act = _argmax_tiebreak(sc, na, act)
            r, term = env.step(a)
            ret = ret + r
            if term or env.t >= env.horizon:
                break
        out[e] = ret
    return out


# -- forests ----------------------------------------------------------------------

def _leaves(feature, threshold, left, right, root, Z):
    node = np.full(Z.shape[0], root, dtype=np.int64)
    rows = np.arange(Z.shape[0])
    while True:
        f = feature[node]
        inner = f >= 0
        if not inner.any():
            return node
        r = rows[inner]
        nd = node[inner]
        go_left = Z[r, f[inner]] <= threshold[nd]
        node[inner] = np.where(go_left, left[nd], right[nd])


def forest_predict(feature, threshold, left, right, value, roots, X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    acc = np.zeros(X.shape[0], dtype=np.float64)
    for root in roots:
        acc += value[_leaves(feature, threshold, left, right, int(root), X)]
    return acc / len(roots)


def coalition_values(feature, threshold, left, right, value, roots, x, bg):
    """Mean forest output over ``bg`` with features in each mask taken from ``x``."""
    x = np.asarray(x, dtype=np.float64)
    bg = np.asarray(bg, dtype=np.float64)
    n_bg, m = bg.shape
    n_masks = 1 << m
    masks = np.arange(n_masks)
    bits = ((masks[:, None] >> np.arange(m)) & 1).astype(bool)
    Z = np.where(bits[:, None, :], x[None, None, :], bg[None, :, :]).reshape(-1, m)
    P = forest_predict(feature, threshold, left, right, value, roots, Z).reshape(n_masks, n_bg)
    s = np.zeros(n_masks, dtype=np.float64)
    for b in range(n_bg):
        s = s + P[:, b]
    return s / n_bg
