"""Regenerate ``src/privplf/data/case118_9region.json`` and the wind samples.

Requires the IEEE 118-bus data from PYPOWER (``pip install pypower``); the
package itself does not depend on it.  Transformer taps are dropped (the DLPF
case format has no tap field).  Nine wind farms are attached to the system, one
per region, each through a short line to the region's best-connected PQ bus.

Usage: python scripts/build_case118.py [--seed 118]
"""

import argparse
import csv
import json
import math
from collections import deque
from pathlib import Path

import numpy as np
from scipy import stats

DATA = Path(__file__).resolve().parents[1] / "src" / "privplf" / "data"
N_REGIONS = 9
POWER_FACTOR = 0.95


def grow_regions(n_bus, edges, seeds):
    """Multi-source BFS: every region is connected by construction."""
    adj = [[] for _ in range(n_bus)]
    for f, t in edges:
        adj[f].append(t)
        adj[t].append(f)
    label = [-1] * n_bus
    queue = deque()
    for r, s in enumerate(seeds):
        label[s] = r
        queue.append(s)
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if label[v] < 0:
                label[v] = label[u]
                queue.append(v)
    return label, adj


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=118)
    ap.add_argument("--samples", type=int, default=8760)
    args = ap.parse_args()

    from pypower.case118 import case118

    ppc = case118()
    base = float(ppc["baseMVA"])
    bus, gen, branch = ppc["bus"], ppc["gen"], ppc["branch"]
    ids = [int(b[0]) for b in bus]
    pos = {b: k for k, b in enumerate(ids)}
    pg = np.zeros(len(ids))
    qg = np.zeros(len(ids))
    vg = {}
    for g in gen:
        k = pos[int(g[0])]
        pg[k] += g[1]
        qg[k] += g[2]
        vg[int(g[0])] = float(g[5])

    kind_of = {1: "pq", 2: "pv", 3: "slack"}
    buses = []
    for k, b in enumerate(bus):
        kind = kind_of[int(b[1])]
        entry = {
            "id": ids[k],
            "class": kind,
            "p": round((pg[k] - b[2]) / base, 6),
            "q": round((qg[k] - b[3]) / base, 6),
            "gs": round(b[4] / base, 6),
            "bs": round(b[5] / base, 6),
        }
        if kind in ("pv", "slack"):
            entry["v"] = vg.get(ids[k], float(b[7]))
        if kind == "slack":
            entry["theta"] = round(math.radians(b[8]), 8)
        buses.append(entry)

    edges = [(pos[int(br[0])], pos[int(br[1])]) for br in branch]
    branches = [
        {"from": int(br[0]), "to": int(br[1]), "r": float(br[2]), "x": float(br[3]), "b": float(br[4])}
        for br in branch
    ]

    rng = np.random.default_rng(args.seed)
    kinds = [e["class"] for e in buses]
    for _ in range(1000):
        seeds = rng.choice(len(ids), size=N_REGIONS, replace=False)
        label, adj = grow_regions(len(ids), edges, seeds)
        sizes = np.bincount(label, minlength=N_REGIONS)
        has_pq = all(any(kinds[k] == "pq" for k in range(len(ids)) if label[k] == r) for r in range(N_REGIONS))
        if has_pq and sizes.min() >= 8:
            break
    else:
        raise SystemExit("could not find a balanced partition")
    order = sorted(range(N_REGIONS), key=lambda r: min(ids[k] for k in range(len(ids)) if label[k] == r))
    relabel = {old: new + 1 for new, old in enumerate(order)}
    regions = {str(ids[k]): relabel[label[k]] for k in range(len(ids))}

    tan_phi = math.tan(math.acos(POWER_FACTOR))
    capacity = np.round(rng.uniform(0.6, 1.2, size=N_REGIONS), 3)
    w_ids = []
    for r in range(1, N_REGIONS + 1):
        members = [k for k in range(len(ids)) if regions[str(ids[k])] == r and kinds[k] == "pq"]
        host = max(members, key=lambda k: (len(adj[k]), -ids[k]))
        wid = 119 + r - 1
        w_ids.append(wid)
        buses.append({"id": wid, "class": "uncertain", "p": 0.0, "q": 0.0})
        branches.append({"from": ids[host], "to": wid, "r": 0.002, "x": 0.02, "b": 0.0})
        regions[str(wid)] = r

    # correlated wind output: Gaussian copula with Beta(2, 3) marginals
    dist = np.abs(np.subtract.outer(np.arange(N_REGIONS), np.arange(N_REGIONS)))
    corr = 0.35 + 0.5 * np.exp(-dist / 2.0)
    np.fill_diagonal(corr, 1.0)
    z = rng.multivariate_normal(np.zeros(N_REGIONS), corr, size=args.samples)
    p = stats.beta(2.0, 3.0).ppf(stats.norm.cdf(z)) * capacity
    p = np.round(p, 6)
    mean_p = p.mean(axis=0)
    for k, wid in enumerate(w_ids):
        entry = next(b for b in buses if b["id"] == wid)
        entry["p"] = round(float(mean_p[k]), 6)
        entry["q"] = round(float(mean_p[k] * tan_phi), 6)

    case = {"base_mva": base, "buses": buses, "branches": branches, "regions": regions}
    (DATA / "case118_9region.json").write_text(json.dumps(case, indent=1) + "\n")
    with open(DATA / "wind118_samples.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"P_W{w}" for w in w_ids])
        writer.writerows(p.tolist())
    print("regions sizes:", np.bincount([regions[str(i)] for i in ids])[1:])
    print("wind capacity:", capacity)


if __name__ == "__main__":
    main()
