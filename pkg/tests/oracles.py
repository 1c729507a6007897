"""
Brute-force reference implementations used to cross-check the library
"""

import ipaddress

from cipollino.topology import Relationship, RouteClass

MAX_ROUNDS = 1000


def _route_class(topology, asn, neighbor):
    rel = topology.relationship(asn, neighbor)
    if rel == Relationship.P2C:
        return RouteClass.CUSTOMER
    if rel == Relationship.P2P:
        return RouteClass.PEER
    return RouteClass.PROVIDER


def converge(topology, origins):
    """Replay route announcements until no AS changes its best routes.

    Returns asn -> (route class, set of tied best paths).
    """
    origins = set(origins)
    best = {o: (RouteClass.ORIGIN, {(o,)}) for o in origins}
    for _ in range(MAX_ROUNDS):
        changed = False
        for asn in topology.ases:
            if asn in origins:
                continue
            candidates = []
            for neighbor in sorted(topology.g[asn]):
                if neighbor not in best:
                    continue
                neighbor_class, paths = best[neighbor]
                exports = neighbor_class >= RouteClass.CUSTOMER or topology.relationship(neighbor, asn) == Relationship.P2C
                if not exports:
                    continue
                cls = _route_class(topology, asn, neighbor)
                for path in paths:
                    if asn not in path:
                        candidates.append((cls, len(path) + 1, (asn,) + path))
            if not candidates:
                new = None
            else:
                top_class = max(c for c, _, _ in candidates)
                shortest = min(n for c, n, _ in candidates if c == top_class)
                new = (top_class, {p for c, n, p in candidates if c == top_class and n == shortest})
            if new != best.get(asn):
                changed = True
                if new is None:
                    del best[asn]
                else:
                    best[asn] = new
        if not changed:
            return best
    raise AssertionError("route replay did not converge")


def captured_by(topology, attacker, victim):
    """ASes with at least one tied best path ending at the attacker"""
    best = converge(topology, {attacker, victim})
    return {asn for asn, (_, paths) in best.items() if asn != attacker and any(p[-1] == attacker for p in paths)}


def valley_free(topology, path):
    """Up-steps, at most one peer step, then down-steps"""
    descending = False
    for a, b in zip(path, path[1:]):
        rel = topology.relationship(a, b)
        if rel == Relationship.C2P:
            if descending:
                return False
        elif rel == Relationship.P2P:
            if descending:
                return False
            descending = True
        else:
            descending = True
    return len(set(path)) == len(path)


def longest_prefix_origin(prefix_table, ip):
    """Linear scan for the longest prefix containing ip"""
    best = None
    for prefix, origin in prefix_table.items():
        if ip in prefix and (best is None or prefix.prefixlen > best[0].prefixlen):
            best = (prefix, origin)
    return best[1] if best else None


def policy_allows(rules, ip, port):
    """Walk ``[action, address, lo, hi]`` rules the slow way"""
    for action, address, lo, hi in rules:
        if not lo <= port <= hi:
            continue
        if address != "*":
            network = ipaddress.ip_network(address if "/" in address else f"{address}/32")
            if ipaddress.ip_address(str(ip)) not in network:
                continue
        return action == "accept"
    return False
