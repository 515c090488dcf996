# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; operation-for-operation twin of ``_pykernels``."""

import numpy as np

from libc.math cimport exp, log, sin, tanh, fmod, sqrt, isfinite, M_PI
from libc.stdint cimport uint64_t, int64_t

BACKEND = "cython"

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t STREAM_ENV = 0x5851F42D4C957F2DULL
cdef uint64_t STREAM_ACT = 0x14057B7EF767814FULL
cdef double TWO_PI = 2.0 * M_PI
cdef double INV_2_53 = 1.0 / 9007199254740992.0

cdef int TASK_GRID = 0
cdef int GRID_ACTIONS = 4
cdef int PEND_ACTIONS = 5
cdef int CELL_GOAL = 1
cdef int CELL_PIT = 2
cdef int[4] GRID_DX = [0, 1, 0, -1]
cdef int[4] GRID_DY = [1, 0, -1, 0]

cdef double PEND_MAX_SPEED = 8.0
cdef int N_TILINGS = 8
cdef int N_TILES = 8
cdef int TILING_SIDE = 9
cdef int TILING_SIZE = 81
cdef double TILE_W_THETA = TWO_PI / 8
cdef double TILE_W_OMEGA = 2.0 * 8.0 / 8

cdef double PPO_LAMBDA = 0.95
cdef int PPO_EPOCHS = 4
cdef double PPO_VF_COEF = 0.5
cdef int A2C_STEPS = 5
cdef int Q_BATCH = 32
cdef int Q_LEARN_START = 100
cdef double Q_EPSILON = 0.1
cdef double REFERENCE_BUDGET = 100000.0
cdef double SAC_BUFFER = 1000000.0


# -- random numbers ---------------------------------------------------------

cdef inline uint64_t _mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double _next(uint64_t* state) nogil:
    state[0] = state[0] + GOLDEN
    return <double>(_mix64(state[0]) >> 11) * INV_2_53


def mix64(z):
    return _mix64(<uint64_t>(int(z) & 0xFFFFFFFFFFFFFFFF))


def stream_state(seed, stream):
    return _mix64(<uint64_t>((int(seed) & 0xFFFFFFFFFFFFFFFF) ^ int(stream)))


def uniforms(state, n):
    cdef uint64_t s = <uint64_t>int(state)
    out = []
    for _ in range(n):
        out.append(_next(&s))
    return s, out


# -- environments -------------------------------------------------------------

cdef struct Env:
    int task
    const unsigned char* cells
    int width
    int height
    int start
    double phys[5]
    int integrator
    int horizon
    int n_act
    int n_active
    int n_feat
    int pos
    double theta
    double omega
    uint64_t rng
    int t


cdef void _env_init(Env* env, int task, const unsigned char* cells, int width, int height,
                    int start, const double[:] phys, int integrator, int horizon):
    cdef int i
    env.task = task
    env.cells = cells
    env.width = width
    env.height = height
    env.start = start
    for i in range(5):
        env.phys[i] = phys[i] if i < phys.shape[0] else 0.0
    env.integrator = integrator
    env.horizon = horizon
    if task == TASK_GRID:
        env.n_act = GRID_ACTIONS
        env.n_active = 1
        env.n_feat = width * height
    else:
        env.n_act = PEND_ACTIONS
        env.n_active = N_TILINGS
        env.n_feat = N_TILINGS * TILING_SIZE
    env.pos = start
    env.theta = 0.0
    env.omega = 0.0
    env.rng = 0
    env.t = 0


cdef inline int _grid_step(const unsigned char* cells, int width, int height, double* phys,
                           int pos, int action, uint64_t* state, double* reward) nogil:
    cdef double u1 = _next(state)
    cdef double u2 = _next(state)
    cdef int d = action
    cdef double p_cw
    cdef int x, y, cell
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
    reward[0] = phys[2]
    cell = cells[pos]
    if cell == CELL_GOAL:
        reward[0] = reward[0] + 1.0
        return pos | (1 << 30)
    elif cell == CELL_PIT:
        reward[0] = reward[0] - 1.0
        return pos | (1 << 30)
    return pos


cdef inline double _wrap(double theta) nogil:
    theta = fmod(theta, TWO_PI)
    if theta < 0.0:
        theta = theta + TWO_PI
    if theta >= TWO_PI:
        theta = 0.0
    return theta


cdef inline double _pend_step(double* phys, int integrator, double* theta, double* omega,
                              int action) nogil:
    cdef double gravity = phys[0]
    cdef double damping = phys[1]
    cdef double mass = phys[2]
    cdef double dt = phys[3]
    cdef double u = <double>(action - 2)
    cdef double th = theta[0]
    cdef double om = omega[0]
    cdef double err = th
    cdef double reward, fric, acc
    if err > M_PI:
        err = TWO_PI - th
    reward = -(err * err + 0.1 * om * om + 0.001 * u * u)
    if phys[4] == 0.0:
        fric = damping * om
    else:
        fric = damping * tanh(om / 0.05)
    acc = (mass * gravity * sin(th) + u - fric) / mass
    if integrator == 0:
        om = om + dt * acc
        if om > PEND_MAX_SPEED:
            om = PEND_MAX_SPEED
        elif om < -PEND_MAX_SPEED:
            om = -PEND_MAX_SPEED
        th = th + dt * om
    else:
        th = th + dt * om
        om = om + dt * acc
        if om > PEND_MAX_SPEED:
            om = PEND_MAX_SPEED
        elif om < -PEND_MAX_SPEED:
            om = -PEND_MAX_SPEED
    theta[0] = _wrap(th)
    omega[0] = om
    return reward


cdef inline void _pend_features(double theta, double omega, int* out) nogil:
    cdef double w = omega + PEND_MAX_SPEED
    cdef double off_t, off_w
    cdef int k, ix, iy
    for k in range(N_TILINGS):
        off_t = <double>((k * 1) % N_TILINGS) / <double>N_TILINGS * TILE_W_THETA
        off_w = <double>((k * 3) % N_TILINGS) / <double>N_TILINGS * TILE_W_OMEGA
        ix = <int>((theta + off_t) / TILE_W_THETA)
        iy = <int>((w + off_w) / TILE_W_OMEGA)
        out[k] = k * TILING_SIZE + ix * TILING_SIDE + iy


cdef inline void _env_reset(Env* env, uint64_t seed) nogil:
    env.rng = _mix64(seed ^ STREAM_ENV)
    env.t = 0
    if env.task == TASK_GRID:
        env.pos = env.start
    else:
        env.theta = M_PI - 0.1 + 0.2 * _next(&env.rng)
        env.omega = 0.0


cdef inline void _env_features(Env* env, int* out) nogil:
    if env.task == TASK_GRID:
        out[0] = env.pos
    else:
        _pend_features(env.theta, env.omega, out)


cdef inline double _env_step(Env* env, int action, int* term) nogil:
    cdef double r = 0.0
    cdef int res
    env.t += 1
    if env.task == TASK_GRID:
        res = _grid_step(env.cells, env.width, env.height, env.phys, env.pos, action,
                         &env.rng, &r)
        term[0] = 1 if res & (1 << 30) else 0
        env.pos = res & ((1 << 30) - 1)
    else:
        r = _pend_step(env.phys, env.integrator, &env.theta, &env.omega, action)
        term[0] = 0
    return r


def grid_step(cells, int width, int height, phys, int pos, int action, state):
    cdef const unsigned char[:] c = np.ascontiguousarray(cells, dtype=np.uint8)
    cdef double p[3]
    cdef uint64_t s = <uint64_t>int(state)
    cdef double r = 0.0
    cdef int res
    p[0] = phys[0]
    p[1] = phys[1]
    p[2] = phys[2]
    res = _grid_step(&c[0], width, height, p, pos, action, &s, &r)
    return res & ((1 << 30) - 1), r, bool(res & (1 << 30)), s


def pend_reset(state):
    cdef uint64_t s = <uint64_t>int(state)
    cdef double u = _next(&s)
    return M_PI - 0.1 + 0.2 * u, s


def pend_step(phys, int integrator, double theta, double omega, int action):
    cdef double p[5]
    cdef int i
    for i in range(5):
        p[i] = phys[i]
    r = _pend_step(p, integrator, &theta, &omega, action)
    return theta, omega, r


def pend_features(double theta, double omega, out):
    cdef int buf[8]
    cdef int k
    _pend_features(theta, omega, buf)
    for k in range(N_TILINGS):
        out[k] = buf[k]


# -- policy helpers -------------------------------------------------------------

cdef inline void _scores(double* table, int* feats, int k, int na, double* out) nogil:
    cdef int b, j, base
    for b in range(na):
        out[b] = 0.0
    for j in range(k):
        base = feats[j] * na
        for b in range(na):
            out[b] = out[b] + table[base + b]


cdef inline int _argmax_tiebreak(double* vals, int na, uint64_t* state) nogil:
    cdef double best = vals[0]
    cdef int count = 1
    cdef int b, pick
    cdef double v, u
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
                return b
    u = _next(state)
    pick = <int>(u * count)
    for b in range(na):
        if vals[b] == best:
            if pick == 0:
                return b
            pick -= 1
    return na - 1


cdef inline void _softmax(double* vals, int na, double inv_temp, double* out) nogil:
    cdef double m = vals[0] * inv_temp
    cdef double total = 0.0
    cdef double e
    cdef int b
    for b in range(1, na):
        if vals[b] * inv_temp > m:
            m = vals[b] * inv_temp
    for b in range(na):
        e = exp(vals[b] * inv_temp - m)
        out[b] = e
        total = total + e
    for b in range(na):
        out[b] = out[b] / total


cdef inline int _sample(double* probs, int na, uint64_t* state) nogil:
    cdef double u = _next(state)
    cdef double acc = 0.0
    cdef int b
    for b in range(na - 1):
        acc = acc + probs[b]
        if u < acc:
            return b
    return na - 1


cdef bint _all_finite(double[:] arr) nogil:
    cdef Py_ssize_t i
    for i in range(arr.shape[0]):
        if not isfinite(arr[i]):
            return False
    return True


# -- training -------------------------------------------------------------------

cdef class _Episodes:
    cdef uint64_t seed
    cdef long index
    cdef double ret
    cdef list ends
    cdef list returns

    def __cinit__(self, uint64_t seed):
        self.seed = seed
        self.index = 0
        self.ret = 0.0
        self.ends = []
        self.returns = []

    cdef void start(self, Env* env):
        cdef uint64_t ep_seed = _mix64(self.seed + GOLDEN * <uint64_t>(self.index + 1))
        _env_reset(env, ep_seed)
        self.ret = 0.0

    cdef void finish(self, Env* env, long step):
        self.ends.append(step)
        self.returns.append(self.ret)
        self.index += 1
        self.start(env)


cdef tuple _train_pg(Env* env, int algo, double[:] hp, uint64_t seed, long total):
    cdef int na = env.n_act, k = env.n_active, nf = env.n_feat
    cdef double lr = hp[0], gamma = hp[1]
    cdef double clip, lam, vf
    cdef int n_steps
    if algo == 0:
        clip = hp[2]
        n_steps = <int>hp[3]
        lam = PPO_LAMBDA
        vf = PPO_VF_COEF
    else:
        clip = 0.0
        n_steps = A2C_STEPS
        lam = hp[2]
        vf = hp[3]
    cdef double step = lr / k
    W_arr = np.zeros(nf * na, dtype=np.float64)
    V_arr = np.zeros(nf, dtype=np.float64)
    cdef double[:] W = W_arr
    cdef double[:] V = V_arr
    cdef uint64_t agent = _mix64(seed ^ STREAM_ACT)
    cdef _Episodes eps = _Episodes(seed)
    eps.start(env)

    cdef int[:] feats = np.zeros(n_steps * k, dtype=np.intc)
    cdef int[:] acts = np.zeros(n_steps, dtype=np.intc)
    cdef double[:] rews = np.zeros(n_steps)
    cdef double[:] vals = np.zeros(n_steps)
    cdef double[:] nextv = np.zeros(n_steps)
    cdef double[:] cont = np.zeros(n_steps)
    cdef double[:] pold = np.zeros(n_steps * na)
    cdef double[:] adv = np.zeros(n_steps)
    cdef double[:] rets = np.zeros(n_steps)
    cdef int[:] order = np.zeros(n_steps, dtype=np.intc)
    cdef int cur[8]
    cdef double sc[8]
    cdef double probs[8]

    cdef long steps = 0
    cdef int T, t, j, a, b, e, idx, f, base, term, tmp
    cdef double v, v2, r, last, delta, mean, var, d, std, ratio, A, g, dv, ind, p_old, u
    while steps < total:
        T = n_steps
        if total - steps < T:
            T = <int>(total - steps)
        for t in range(T):
            _env_features(env, cur)
            for j in range(k):
                feats[t * k + j] = cur[j]
            _scores(&W[0], cur, k, na, sc)
            _softmax(sc, na, 1.0, probs)
            a = _sample(probs, na, &agent)
            for b in range(na):
                pold[t * na + b] = probs[b]
            v = 0.0
            for j in range(k):
                v = v + V[cur[j]]
            vals[t] = v
            acts[t] = a
            r = _env_step(env, a, &term)
            steps += 1
            eps.ret = eps.ret + r
            rews[t] = r
            if term:
                nextv[t] = 0.0
                cont[t] = 0.0
                eps.finish(env, steps)
            else:
                _env_features(env, cur)
                v2 = 0.0
                for j in range(k):
                    v2 = v2 + V[cur[j]]
                nextv[t] = v2
                if env.t >= env.horizon:
                    cont[t] = 0.0
                    eps.finish(env, steps)
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
                std = sqrt(var / T)
                for t in range(T):
                    adv[t] = (adv[t] - mean) / (std + 1e-8)
            for e in range(PPO_EPOCHS):
                for t in range(T):
                    order[t] = t
                for t in range(T - 1, 0, -1):
                    u = _next(&agent)
                    j = <int>(u * (t + 1))
                    tmp = order[t]
                    order[t] = order[j]
                    order[j] = tmp
                for idx in range(T):
                    t = order[idx]
                    a = acts[t]
                    for j in range(k):
                        cur[j] = feats[t * k + j]
                    _scores(&W[0], cur, k, na, sc)
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
    return W_arr, V_arr, eps


cdef inline double _soft_value(double* table, int* feats, int k, int na, double alpha,
                               double* sc) nogil:
    cdef double m, total
    cdef int b
    _scores(table, feats, k, na, sc)
    m = sc[0]
    for b in range(1, na):
        if sc[b] > m:
            m = sc[b]
    total = 0.0
    for b in range(na):
        total = total + exp((sc[b] - m) / alpha)
    return m + alpha * log(total)


cdef tuple _train_q(Env* env, int algo, double[:] hp, uint64_t seed, long total):
    cdef int na = env.n_act, k = env.n_active, nf = env.n_feat
    cdef double lr = hp[0], gamma = hp[1], tau = hp[2]
    cdef double buffer_size, alpha
    if algo == 2:
        buffer_size = hp[3]
        alpha = 0.0
    else:
        buffer_size = SAC_BUFFER
        alpha = hp[3]
    cdef long cap = <long>(buffer_size * total / REFERENCE_BUDGET + 0.5)
    if cap < Q_BATCH:
        cap = Q_BATCH
    if cap > total:
        cap = total
    cdef double step = lr / k
    cdef double keep = 1.0 - tau
    cdef long n = nf * na
    Q_arr = np.zeros(n, dtype=np.float64)
    Qt_arr = np.zeros(n, dtype=np.float64)
    cdef double[:] Q = Q_arr
    cdef double[:] Qt = Qt_arr
    cdef uint64_t agent = _mix64(seed ^ STREAM_ACT)
    cdef _Episodes eps = _Episodes(seed)
    eps.start(env)

    cdef int[:] bs = np.zeros(cap * k, dtype=np.intc)
    cdef int[:] bs2 = np.zeros(cap * k, dtype=np.intc)
    cdef int[:] ba = np.zeros(cap, dtype=np.intc)
    cdef double[:] br = np.zeros(cap)
    cdef unsigned char[:] bt = np.zeros(cap, dtype=np.uint8)
    cdef long size = 0
    cdef long head = 0
    cdef int cur[8]
    cdef int nxt[8]
    cdef double sc[8]
    cdef double probs[8]
    cdef double inv_alpha = 1.0 / alpha if alpha > 0.0 else 0.0

    cdef long steps = 0
    cdef long i, ii
    cdef int a, b, j, term, bi
    cdef double u, r, y, m, q, d
    while steps < total:
        _env_features(env, cur)
        _scores(&Q[0], cur, k, na, sc)
        if algo == 2:
            u = _next(&agent)
            if u < Q_EPSILON:
                u = _next(&agent)
                a = <int>(u * na)
            else:
                a = _argmax_tiebreak(sc, na, &agent)
        else:
            _softmax(sc, na, inv_alpha, probs)
            a = _sample(probs, na, &agent)
        r = _env_step(env, a, &term)
        steps += 1
        eps.ret = eps.ret + r
        _env_features(env, nxt)
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
            eps.finish(env, steps)
        if steps >= Q_LEARN_START:
            for bi in range(Q_BATCH):
                u = _next(&agent)
                i = <long>(u * size)
                if bt[i]:
                    y = br[i]
                else:
                    for j in range(k):
                        nxt[j] = bs2[i * k + j]
                    if algo == 2:
                        _scores(&Qt[0], nxt, k, na, sc)
                        m = sc[0]
                        for b in range(1, na):
                            if sc[b] > m:
                                m = sc[b]
                    else:
                        m = _soft_value(&Qt[0], nxt, k, na, alpha, sc)
                    y = br[i] + gamma * m
                a = ba[i]
                q = 0.0
                for j in range(k):
                    q = q + Q[bs[i * k + j] * na + a]
                d = step * (y - q)
                for j in range(k):
                    ii = bs[i * k + j] * na + a
                    Q[ii] = Q[ii] + d
            for ii in range(n):
                Qt[ii] = Qt[ii] * keep + tau * Q[ii]
    return Q_arr, Qt_arr, eps


def train_run(int task, cells, int width, int height, int start, phys, int integrator,
              int horizon, int algo, hp, seed, total_steps):
    """Train one agent; returns (table, aux, ep_ends, ep_returns, diverged)."""
    cells_arr = np.ascontiguousarray(cells, dtype=np.uint8)
    if cells_arr.shape[0] == 0:
        cells_arr = np.zeros(1, dtype=np.uint8)
    cdef const unsigned char[:] c = cells_arr
    cdef double[:] p = np.ascontiguousarray(phys, dtype=np.float64)
    cdef double[:] h = np.ascontiguousarray(hp, dtype=np.float64)
    cdef Env env
    _env_init(&env, task, &c[0], width, height, start, p, integrator, horizon)
    cdef uint64_t s = <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef long total = int(total_steps)
    if algo == 0 or algo == 1:
        table, aux, eps = _train_pg(&env, algo, h, s, total)
    elif algo == 2 or algo == 3:
        table, aux, eps = _train_q(&env, algo, h, s, total)
    else:
        raise ValueError(f"unknown algorithm id {algo}")
    diverged = not (_all_finite(table) and _all_finite(aux))
    cdef _Episodes ep = eps
    return (
        table.reshape(env.n_feat, env.n_act),
        aux,
        np.array(ep.ends, dtype=np.int64),
        np.array(ep.returns, dtype=np.float64),
        diverged,
    )


def evaluate_run(int task, cells, int width, int height, int start, phys, int integrator,
                 int horizon, table, int episodes, eval_seed):
    """Undiscounted returns of the mode-action policy, one per episode."""
    cells_arr = np.ascontiguousarray(cells, dtype=np.uint8)
    if cells_arr.shape[0] == 0:
        cells_arr = np.zeros(1, dtype=np.uint8)
    cdef const unsigned char[:] c = cells_arr
    cdef double[:] p = np.ascontiguousarray(phys, dtype=np.float64)
    cdef double[:] flat = np.ascontiguousarray(table, dtype=np.float64).ravel()
    cdef Env env
    _env_init(&env, task, &c[0], width, height, start, p, integrator, horizon)
    cdef int na = env.n_act, k = env.n_active
    cdef int cur[8]
    cdef double sc[8]
    out_arr = np.empty(episodes, dtype=np.float64)
    cdef double[:] out = out_arr
    cdef uint64_t base_seed = <uint64_t>(int(eval_seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t seed, act
    cdef int e, a, term
    cdef double ret, r
    with nogil:
        for e in range(episodes):
            seed = base_seed + <uint64_t>e
            _env_reset(&env, seed)
            act = _mix64(seed ^ STREAM_ACT)
            ret = 0.0
            while True:
                _env_features(&env, cur)
                _scores(&flat[0], cur, k, na, sc)
                a = _argmax_tiebreak(sc, na, &act)
                r = _env_step(&env, a, &term)
                ret = ret + r
                if term or env.t >= env.horizon:
                    break
            out[e] = ret
    return out_arr


# -- forests ----------------------------------------------------------------------

cdef inline int _leaf(const int[:] feature, const double[:] threshold, const int[:] left,
                      const int[:] right, int node, const double* z) nogil:
    cdef int f = feature[node]
    while f >= 0:
        if z[f] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
        f = feature[node]
    return node


def forest_predict(feature, threshold, left, right, value, roots, X):
    cdef const int[:] fe = np.ascontiguousarray(feature, dtype=np.intc)
    cdef const double[:] th = np.ascontiguousarray(threshold, dtype=np.float64)
    cdef const int[:] le = np.ascontiguousarray(left, dtype=np.intc)
    cdef const int[:] ri = np.ascontiguousarray(right, dtype=np.intc)
    cdef const double[:] va = np.ascontiguousarray(value, dtype=np.float64)
    cdef const int[:] ro = np.ascontiguousarray(roots, dtype=np.intc)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    out_arr = np.empty(Xv.shape[0], dtype=np.float64)
    cdef double[:] out = out_arr
    cdef Py_ssize_t i, t
    cdef int n_trees = ro.shape[0]
    cdef double acc
    with nogil:
        for i in range(Xv.shape[0]):
            acc = 0.0
            for t in range(n_trees):
                acc = acc + va[_leaf(fe, th, le, ri, ro[t], &Xv[i, 0])]
            out[i] = acc / n_trees
    return out_arr


def coalition_values(feature, threshold, left, right, value, roots, x, bg):
    """Mean forest output over ``bg`` with features in each mask taken from ``x``."""
    cdef const int[:] fe = np.ascontiguousarray(feature, dtype=np.intc)
    cdef const double[:] th = np.ascontiguousarray(threshold, dtype=np.float64)
    cdef const int[:] le = np.ascontiguousarray(left, dtype=np.intc)
    cdef const int[:] ri = np.ascontiguousarray(right, dtype=np.intc)
    cdef const double[:] va = np.ascontiguousarray(value, dtype=np.float64)
    cdef const int[:] ro = np.ascontiguousarray(roots, dtype=np.intc)
    cdef const double[:] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] B = np.ascontiguousarray(bg, dtype=np.float64)
    cdef int n_bg = B.shape[0]
    cdef int m = B.shape[1]
    cdef int n_masks = 1 << m
    cdef int n_trees = ro.shape[0]
    out_arr = np.empty(n_masks, dtype=np.float64)
    cdef double[:] out = out_arr
    cdef double[:] z = np.empty(m, dtype=np.float64)
    cdef int mask, b, j, t
    cdef double s, acc
    with nogil:
        for mask in range(n_masks):
            s = 0.0
            for b in range(n_bg):
                for j in range(m):
                    if (mask >> j) & 1:
                        z[j] = xv[j]
                    else:
                        z[j] = B[b, j]
                acc = 0.0
                for t in range(n_trees):
                    acc = acc + va[_leaf(fe, th, le, ri, ro[t], &z[0])]
                s = s + acc / n_trees
            out[mask] = s / n_bg
    return out_arr
