"""Compiled inner loops for the backward recursion and the path simulator.

Every kernel is a pure function of its arguments. The parallel step kernel
writes each grid node to its own output cells, so results are bit-identical
across thread counts and runs.

Interpolation is piecewise-parabolic (3-point Lagrange) in each dimension,
composed as a tensor product: the habit dimension is collapsed first, then
the wealth dimension, in that fixed order everywhere so the scalar API and
the solver agree to the last bit.

Clamp tallies are int64 arrays with five slots: wealth-low, wealth-high,
habit-low, habit-high clamps, and total continuation queries.
"""

import numpy as np
from numba import njit, prange

_INVPHI = 0.6180339887498949  # (sqrt(5) - 1) / 2
_INVPHI2 = 0.3819660112501051  # (3 - sqrt(5)) / 2


@njit(cache=True, nogil=True)
def stencil_inverse_denoms(grid):
    """Inverse Lagrange denominators of the two outer stencil points.

    The middle point is the anchor of the parabolic form and needs none.
    Shape (n-2, 2): column 0 for the left point, column 1 for the right.
    """
    n = grid.shape[0]
    out = np.empty((n - 2, 2))
    for j in range(n - 2):
        p0 = grid[j]
        p1 = grid[j + 1]
        p2 = grid[j + 2]
        out[j, 0] = 1.0 / ((p0 - p1) * (p0 - p2))
        out[j, 1] = 1.0 / ((p2 - p0) * (p2 - p1))
    return out


@njit(cache=True, nogil=True, inline="always")
def _bracket(grid, x):
    """Index j of the interval [grid[j], grid[j+1]] containing x (clamped)."""
    lo = 0
    hi = grid.shape[0] - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if grid[mid] <= x:
            lo = mid
        else:
            hi = mid
    return lo


@njit(cache=True, nogil=True, inline="always")
def _stencil(grid, inv_d, x):
    """3-point stencil base index and outer Lagrange weights at x.

    The parabola through (p0, v0), (p1, v1), (p2, v2) is evaluated anchored
    at the middle point: v1 + l0 * (v0 - v1) + l2 * (v2 - v1). The anchored
    form reproduces constant data exactly bit for bit, which keeps habit-free
    problems exactly independent of the habit coordinate.
    """
    n = grid.shape[0]
    base = _bracket(grid, x) - 1
    if base < 0:
        base = 0
    elif base > n - 3:
        base = n - 3
    d0 = x - grid[base]
    d1 = x - grid[base + 1]
    d2 = x - grid[base + 2]
    l0 = d1 * d2 * inv_d[base, 0]
    l2 = d0 * d1 * inv_d[base, 1]
    return base, l0, l2


@njit(cache=True, nogil=True)
def interp2_point(wg, cg, inv_dw, inv_dc, table, w, c, tally):
    """Parabolic tensor-product interpolation of one (w, c) query.

    Out-of-grid coordinates are clamped to the boundary; tally counts the
    clamps and the query itself.
    """
    tally[4] += 1
    if w < wg[0]:
        w = wg[0]
        tally[0] += 1
    elif w > wg[wg.shape[0] - 1]:
        w = wg[wg.shape[0] - 1]
        tally[1] += 1
    if c < cg[0]:
        c = cg[0]
        tally[2] += 1
    elif c > cg[cg.shape[0] - 1]:
        c = cg[cg.shape[0] - 1]
        tally[3] += 1
    cb, lc0, lc2 = _stencil(cg, inv_dc, c)
    wb, lw0, lw2 = _stencil(wg, inv_dw, w)
    r0 = _anchored(table[wb, cb], table[wb, cb + 1], table[wb, cb + 2], lc0, lc2)
    r1 = _anchored(
        table[wb + 1, cb], table[wb + 1, cb + 1], table[wb + 1, cb + 2], lc0, lc2
    )
    r2 = _anchored(
        table[wb + 2, cb], table[wb + 2, cb + 1], table[wb + 2, cb + 2], lc0, lc2
    )
    return _anchored(r0, r1, r2, lw0, lw2)


@njit(cache=True, nogil=True, inline="always")
def _anchored(v0, v1, v2, l0, l2):
    """Middle-anchored parabolic combination; exact on constant data."""
    return v1 + l0 * (v0 - v1) + l2 * (v2 - v1)


@njit(cache=True, nogil=True, inline="always")
def _collapse_window(next_j, cbase, lc0, lc2, jlo, jhi, scratch):
    """Collapse the habit dimension of next_j into scratch for rows jlo..jhi."""
    for j in range(jlo, jhi + 1):
        scratch[j - jlo] = _anchored(
            next_j[j, cbase], next_j[j, cbase + 1], next_j[j, cbase + 2], lc0, lc2
        )


@njit(cache=True, nogil=True, inline="always")
def _ev_from_window(
    wg, inv_dw, scratch, jlo, w_net, omega, base_growth, b_k, quad_p,
    growth_floor, gamma, tally, c_clamp,
):
    """Expected continuation using a habit-collapsed window of the next slice.

    Queries above the wealth grid clamp to the boundary. Queries below it use
    the power tail J(w) = J(w_min) * (w / w_min)**gamma, the exact asymptotic
    of the value function as wealth vanishes; a plain clamp there would grant
    phantom wealth and reward full consumption at small nodes.

    c_clamp is 0 when the habit coordinate was inside the grid, otherwise the
    tally slot (2 or 3) to charge once per quadrature query.
    """
    n = wg.shape[0]
    nk = b_k.shape[0]
    tally[4] += nk
    if c_clamp > 0:
        tally[c_clamp] += nk
    ev = 0.0
    for k in range(nk):
        g = base_growth + omega * b_k[k]
        if g < growth_floor:
            g = growth_floor
        wq = w_net * g
        if wq < wg[0]:
            tally[0] += 1
            v_min = scratch[0]  # jlo == 0 whenever a below-grid query occurs
            if wq <= 0.0:
                if gamma > 0.0 or v_min == 0.0:
                    continue  # tail value is exactly 0
                ev = -np.inf
                continue
            ev += quad_p[k] * v_min * (wq / wg[0]) ** gamma
            continue
        elif wq > wg[n - 1]:
            wq = wg[n - 1]
            tally[1] += 1
        base, l0, l2 = _stencil(wg, inv_dw, wq)
        ev += quad_p[k] * _anchored(
            scratch[base - jlo],
            scratch[base - jlo + 1],
            scratch[base - jlo + 2],
            l0,
            l2,
        )
    return ev


@njit(cache=True, nogil=True, inline="always")
def _habit_stencil(cg, inv_dc, cb_next):
    """Stencil for the next-step habit average plus the clamp tally slot."""
    nc = cg.shape[0]
    c_clamp = 0
    if cb_next < cg[0]:
        cb_next = cg[0]
        c_clamp = 2
    elif cb_next > cg[nc - 1]:
        cb_next = cg[nc - 1]
        c_clamp = 3
    base, l0, l2 = _stencil(cg, inv_dc, cb_next)
    return base, l0, l2, c_clamp


@njit(cache=True, nogil=True, inline="always")
def _window_bounds(wg, w_net, g_lo, g_hi, growth_floor):
    """Row window of wealth-grid stencil entries reachable from w_net."""
    n = wg.shape[0]
    if g_lo < growth_floor:
        g_lo = growth_floor
    if g_hi < growth_floor:
        g_hi = growth_floor
    w_lo = w_net * g_lo
    w_hi = w_net * g_hi
    if w_lo < wg[0]:
        w_lo = wg[0]
    elif w_lo > wg[n - 1]:
        w_lo = wg[n - 1]
    if w_hi < wg[0]:
        w_hi = wg[0]
    elif w_hi > wg[n - 1]:
        w_hi = wg[n - 1]
    blo = _bracket(wg, w_lo) - 1
    if blo < 0:
        blo = 0
    elif blo > n - 3:
        blo = n - 3
    bhi = _bracket(wg, w_hi) - 1
    if bhi < 0:
        bhi = 0
    elif bhi > n - 3:
        bhi = n - 3
    return blo, bhi + 2


@njit(cache=True, nogil=True, inline="always")
def _flow_utility(consumption, cb, disc_dt, gamma, beta, c0):
    ratio = consumption / (c0 + beta * cb)
    if ratio <= 0.0:
        return 0.0
    return disc_dt * ratio**gamma / gamma


@njit(cache=True, nogil=True)
def _objective(
    consumption, omega, w, cb, inv_i, disc_dt, gamma, beta, c0, dt,
    base_growth, b_k, quad_p, growth_floor,
    wg, cg, inv_dw, inv_dc, next_j, tally, scratch,
):
    """Flow utility plus expected continuation for one control pair."""
    cb_next = consumption * inv_i + (1.0 - inv_i) * cb
    cbase, lc0, lc2, c_clamp = _habit_stencil(cg, inv_dc, cb_next)
    w_net = w - consumption * dt
    if w_net < 0.0:
        w_net = 0.0
    g_lo = base_growth + omega * b_k[0]
    g_hi = base_growth + omega * b_k[b_k.shape[0] - 1]
    if g_lo > g_hi:
        g_lo, g_hi = g_hi, g_lo
    jlo, jhi = _window_bounds(wg, w_net, g_lo, g_hi, growth_floor)
    _collapse_window(next_j, cbase, lc0, lc2, jlo, jhi, scratch)
    ev = _ev_from_window(
        wg, inv_dw, scratch, jlo, w_net, omega, base_growth, b_k, quad_p,
        growth_floor, gamma, tally, c_clamp,
    )
    return _flow_utility(consumption, cb, disc_dt, gamma, beta, c0) + ev


@njit(cache=True, nogil=True)
def _node_solve(
    w, cb, inv_i, disc_dt, gamma, beta, c0, dt,
    base_growth, b_k, quad_p, growth_floor, c_floor,
    n_scan, gs_reltol, wg, cg, inv_dw, inv_dc, next_j, tally, scratch,
):
    """Maximize over the control box [c_floor, w/dt] x [0, 1] at one node.

    Coarse n_scan x n_scan grid scan, then two rounds of coordinate-wise
    golden-section refinement. Ties break toward smaller consumption, then
    smaller portfolio weight.
    """
    cmax = w / dt
    if cmax <= c_floor:
        # No room to choose: consume whatever there is, stay in the bond.
        flow = _flow_utility(cmax, cb, disc_dt, gamma, beta, c0)
        return cmax, 0.0, flow

    nk = b_k.shape[0]
    g_min = base_growth + min(b_k[0], 0.0)
    g_max = base_growth + max(b_k[nk - 1], 0.0)
    dc = (cmax - c_floor) / (n_scan - 1)
    dw = 1.0 / (n_scan - 1)

    best_v = -np.inf
    best_c = c_floor
    best_w = 0.0
    for jc in range(n_scan):
        cons = cmax if jc == n_scan - 1 else c_floor + jc * dc
        cb_next = cons * inv_i + (1.0 - inv_i) * cb
        cbase, lc0, lc2, c_clamp = _habit_stencil(cg, inv_dc, cb_next)
        w_net = w - cons * dt
        if w_net < 0.0:
            w_net = 0.0
        jlo, jhi = _window_bounds(wg, w_net, g_min, g_max, growth_floor)
        _collapse_window(next_j, cbase, lc0, lc2, jlo, jhi, scratch)
        flow = _flow_utility(cons, cb, disc_dt, gamma, beta, c0)
        for jw in range(n_scan):
            om = 1.0 if jw == n_scan - 1 else jw * dw
            v = flow + _ev_from_window(
                wg, inv_dw, scratch, jlo, w_net, om, base_growth, b_k,
                quad_p, growth_floor, gamma, tally, c_clamp,
            )
            if v > best_v:
                best_v = v
                best_c = cons
                best_w = om

    c_tol = gs_reltol * (cmax - c_floor)
    for _round in range(2):
        # refine consumption at fixed weight
        a = best_c - dc
        if a < c_floor:
            a = c_floor
        b = best_c + dc
        if b > cmax:
            b = cmax
        cand_x, cand_v = _golden_consumption(
            a, b, c_tol, best_w, w, cb, inv_i, disc_dt, gamma, beta, c0, dt,
            base_growth, b_k, quad_p, growth_floor,
            wg, cg, inv_dw, inv_dc, next_j, tally, scratch,
        )
        if cand_v > best_v or (cand_v == best_v and cand_x < best_c):
            best_v = cand_v
            best_c = cand_x
        # refine weight at fixed consumption
        a = best_w - dw
        if a < 0.0:
            a = 0.0
        b = best_w + dw
        if b > 1.0:
            b = 1.0
        cand_x, cand_v = _golden_weight(
            a, b, gs_reltol, best_c, w, cb, inv_i, disc_dt, gamma, beta, c0,
            dt, base_growth, b_k, quad_p, growth_floor, g_min, g_max,
            wg, cg, inv_dw, inv_dc, next_j, tally, scratch,
        )
        if cand_v > best_v or (cand_v == best_v and cand_x < best_w):
            best_v = cand_v
            best_w = cand_x

    return best_c, best_w, best_v


@njit(cache=True, nogil=True)
def _golden_consumption(
    a, b, tol, omega, w, cb, inv_i, disc_dt, gamma, beta, c0, dt,
    base_growth, b_k, quad_p, growth_floor,
    wg, cg, inv_dw, inv_dc, next_j, tally, scratch,
):
    h = b - a
    if h <= tol:
        x = 0.5 * (a + b)
        v = _objective(
            x, omega, w, cb, inv_i, disc_dt, gamma, beta, c0, dt, base_growth,
            b_k, quad_p, growth_floor, wg, cg, inv_dw, inv_dc,
            next_j, tally, scratch,
        )
        return x, v
    xc = a + _INVPHI2 * h
    xd = a + _INVPHI * h
    fc = _objective(
        xc, omega, w, cb, inv_i, disc_dt, gamma, beta, c0, dt, base_growth,
        b_k, quad_p, growth_floor, wg, cg, inv_dw, inv_dc, next_j, tally,
        scratch,
    )
    fd = _objective(
        xd, omega, w, cb, inv_i, disc_dt, gamma, beta, c0, dt, base_growth,
        b_k, quad_p, growth_floor, wg, cg, inv_dw, inv_dc, next_j, tally,
        scratch,
    )
    if fc >= fd:
        best_x, best_v = xc, fc
    else:
        best_x, best_v = xd, fd
    while h > tol:
        if fc >= fd:  # keep the left interval on ties: smaller consumption
            b = xd
            xd = xc
            fd = fc
            h = b - a
            xc = a + _INVPHI2 * h
            fc = _objective(
                xc, omega, w, cb, inv_i, disc_dt, gamma, beta, c0, dt,
                base_growth, b_k, quad_p, growth_floor,
                wg, cg, inv_dw, inv_dc, next_j, tally, scratch,
            )
            if fc > best_v or (fc == best_v and xc < best_x):
                best_x, best_v = xc, fc
        else:
            a = xc
            xc = xd
            fc = fd
            h = b - a
            xd = a + _INVPHI * h
            fd = _objective(
                xd, omega, w, cb, inv_i, disc_dt, gamma, beta, c0, dt,
                base_growth, b_k, quad_p, growth_floor,
                wg, cg, inv_dw, inv_dc, next_j, tally, scratch,
            )
            if fd > best_v or (fd == best_v and xd < best_x):
                best_x, best_v = xd, fd
    return best_x, best_v


@njit(cache=True, nogil=True)
def _golden_weight(
    a, b, tol, consumption, w, cb, inv_i, disc_dt, gamma, beta, c0, dt,
    base_growth, b_k, quad_p, growth_floor, g_min, g_max,
    wg, cg, inv_dw, inv_dc, next_j, tally, scratch,
):
    # consumption is fixed: hoist the habit stencil and the window collapse
    cb_next = consumption * inv_i + (1.0 - inv_i) * cb
    cbase, lc0, lc2, c_clamp = _habit_stencil(cg, inv_dc, cb_next)
    w_net = w - consumption * dt
    if w_net < 0.0:
        w_net = 0.0
    jlo, jhi = _window_bounds(wg, w_net, g_min, g_max, growth_floor)
    _collapse_window(next_j, cbase, lc0, lc2, jlo, jhi, scratch)
    flow = _flow_utility(consumption, cb, disc_dt, gamma, beta, c0)

    h = b - a
    if h <= tol:
        x = 0.5 * (a + b)
        v = flow + _ev_from_window(
            wg, inv_dw, scratch, jlo, w_net, x, base_growth, b_k, quad_p,
            growth_floor, gamma, tally, c_clamp,
        )
        return x, v
    xc = a + _INVPHI2 * h
    xd = a + _INVPHI * h
    fc = flow + _ev_from_window(
        wg, inv_dw, scratch, jlo, w_net, xc, base_growth, b_k, quad_p,
        growth_floor, gamma, tally, c_clamp,
    )
    fd = flow + _ev_from_window(
        wg, inv_dw, scratch, jlo, w_net, xd, base_growth, b_k, quad_p,
        growth_floor, gamma, tally, c_clamp,
    )
    if fc >= fd:
        best_x, best_v = xc, fc
    else:
        best_x, best_v = xd, fd
    while h > tol:
        if fc >= fd:
            b = xd
            xd = xc
            fd = fc
            h = b - a
            xc = a + _INVPHI2 * h
            fc = flow + _ev_from_window(
                wg, inv_dw, scratch, jlo, w_net, xc, base_growth, b_k, quad_p,
                growth_floor, gamma, tally, c_clamp,
            )
            if fc > best_v or (fc == best_v and xc < best_x):
                best_x, best_v = xc, fc
        else:
            a = xc
            xc = xd
            fc = fd
            h = b - a
            xd = a + _INVPHI * h
            fd = flow + _ev_from_window(
                wg, inv_dw, scratch, jlo, w_net, xd, base_growth, b_k, quad_p,
                growth_floor, gamma, tally, c_clamp,
            )
            if fd > best_v or (fd == best_v and xd < best_x):
                best_x, best_v = xd, fd
    return best_x, best_v


@njit(cache=True, nogil=True, parallel=True)
def backward_step(
    wg, cg, inv_dw, inv_dc, next_j, out_j, out_c, out_w, tallies,
    step_index, dt, disc, gamma, beta, c0,
    base_growth, b_k, quad_p, growth_floor, c_floor, n_scan, gs_reltol,
):
    """One backward-induction step over all (wealth, habit) nodes."""
    nw = wg.shape[0]
    nc = cg.shape[0]
    inv_i = 1.0 / step_index
    disc_dt = disc * dt
    for idx in prange(nw * nc):
        iw = idx // nc
        ic = idx % nc
        scratch = np.empty(nw)
        c_opt, w_opt, j_opt = _node_solve(
            wg[iw], cg[ic], inv_i, disc_dt, gamma, beta, c0, dt,
            base_growth, b_k, quad_p, growth_floor, c_floor,
            n_scan, gs_reltol, wg, cg, inv_dw, inv_dc, next_j,
            tallies[idx], scratch,
        )
        out_j[iw, ic] = j_opt
        out_c[iw, ic] = c_opt
        out_w[iw, ic] = w_opt


@njit(cache=True, nogil=True)
def policy_eval(
    wg, cg, inv_dw, inv_dc, pol_c, pol_w, w, cb, dt, tally,
):
    """Interpolate one policy pair and clamp to the admissible box."""
    c = interp2_point(wg, cg, inv_dw, inv_dc, pol_c, w, cb, tally)
    om = interp2_point(wg, cg, inv_dw, inv_dc, pol_w, w, cb, tally)
    cmax = w / dt
    if c < 0.0:
        c = 0.0
    elif c > cmax:
        c = cmax
    if om < 0.0:
        om = 0.0
    elif om > 1.0:
        om = 1.0
    return c, om


@njit(cache=True, nogil=True)
def simulate_paths(
    wg, cg, inv_dw, inv_dc, pol_c, pol_w, z_mat, w0, dt,
    r, mu, sig_sqdt, growth_floor,
    out_s, out_w, out_c, out_cb, out_om, escape_counts, tally,
):
    """Forward-simulate controlled paths under the interpolated policy.

    z_mat has shape (n_paths, n_steps). Output arrays carry n_steps + 1
    columns; consumption and weight are written only for the n_steps decision
    columns. escape_counts[p] counts steps of path p whose (wealth, habit)
    state left the grid before clamping.
    """
    n_paths, n_steps = z_mat.shape
    nw = wg.shape[0]
    nc = cg.shape[0]
    for p in range(n_paths):
        w = w0
        cb = 0.0
        s = 1.0
        out_w[p, 0] = w
        out_s[p, 0] = s
        out_cb[p, 0] = cb
        for i in range(1, n_steps + 1):
            if w < wg[0] or w > wg[nw - 1] or cb < cg[0] or cb > cg[nc - 1]:
                escape_counts[p] += 1
            c, om = policy_eval(
                wg, cg, inv_dw, inv_dc, pol_c[i - 1], pol_w[i - 1], w, cb,
                dt, tally,
            )
            z = z_mat[p, i - 1]
            g = 1.0 + (1.0 - om) * r * dt + om * (mu * dt + sig_sqdt * z)
            if g < growth_floor:
                g = growth_floor
            gs = 1.0 + mu * dt + sig_sqdt * z
            if gs < growth_floor:
                gs = growth_floor
            w_net = w - c * dt
            if w_net < 0.0:
                w_net = 0.0
            w = w_net * g
            s = s * gs
            cb = c / i + (i - 1.0) / i * cb
            out_c[p, i - 1] = c
            out_om[p, i - 1] = om
            out_w[p, i] = w
            out_s[p, i] = s
            out_cb[p, i] = cb
