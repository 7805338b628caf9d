"""Reference computations that share no code with the simulator."""
from __future__ import annotations


def fluid_completion_times(bandwidth, latency, flows):
    """Completion times for flows on one equal-share link.

    ``flows`` is a list of (open_time, nbytes). A flow occupies the link from
    open_time + latency until its bytes are delivered; zero-byte flows finish
    at open_time + latency. Integration steps between activation and
    completion instants with constant rates in between.
    """
    act = [t + latency for t, _ in flows]
    rem = [float(b) for _, b in flows]
    done = [None] * len(flows)
    for i, (_, b) in enumerate(flows):
        if b == 0:
            done[i] = act[i]
    t = min(act) if act else 0.0
    while any(d is None for d in done):
        active = [i for i in range(len(flows)) if done[i] is None and act[i] <= t]
        future = [act[i] for i in range(len(flows)) if done[i] is None and act[i] > t]
        if not active:
            t = min(future)
            continue
        rate = bandwidth / len(active)
        t_fin = t + min(rem[i] for i in active) / rate
        t_new = min([t_fin] + future)
        dt = t_new - t
        for i in active:
            rem[i] -= rate * dt
        if t_new == t_fin:
            m = min(rem[i] for i in active)
            for i in active:
                if rem[i] <= m + 1e-12 * flows[i][1]:
                    done[i] = t_new
                    rem[i] = 0.0
        t = t_new
    return done


def fifo_schedule(jobs, sites):
    """Brute-force timeline for zero-I/O, zero-overhead, single-site-per-job runs.

    ``jobs``: list of dicts with id, submit, work, cores, site (pinned).
    ``sites``: dict name -> (total_cores, speed).
    Each site starts jobs strictly in submit order as soon as enough cores
    are free; returns {id: (start, finish)}.
    """
    out = {}
    for name, (total, speed) in sites.items():
        queue = sorted((j for j in jobs if j["site"] == name), key=lambda j: (j["submit"], j["id"]))
        running = []  # (finish, cores)
        t = 0.0
        for j in queue:
            t = max(t, j["submit"])
            while True:
                running = [(f, c) for f, c in running if f > t]
                used = sum(c for _, c in running)
                if total - used >= j["cores"]:
                    break
                t = min(f for f, _ in running)
            finish = t + j["work"] / (j["cores"] * speed)
            running.append((finish, j["cores"]))
            out[j["id"]] = (t, finish)
    return out
