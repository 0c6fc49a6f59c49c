from __future__ import annotations


def completions(cluster, client=None):
    """``(latency, summary)`` for every completed operation, in completion order."""
    invoked = {}
    out = []
    for r in cluster.trace.of_kind("event"):
        s = r.summary
        if client is not None and s.get("client") != client:
            continue
        if s["event"] == "invoke":
            invoked[(s["client"], s["op_id"])] = r.tick
        elif s["event"] == "complete":
            out.append((r.tick - invoked[(s["client"], s["op_id"])], s))
    return out


def events(cluster, name):
    return [r.summary for r in cluster.trace.events(name)]
