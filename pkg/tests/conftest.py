import numpy as np
import pytest

from anembed.graph_io import Graph


def path_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def triangle() -> Graph:
    return Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])


def random_graph(n: int, p: float, seed: int) -> Graph:
    """Erdos-Renyi graph with a spanning path so every node has a neighbor."""
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    edges = set(zip(iu[keep].tolist(), ju[keep].tolist()))
    edges.update((i, i + 1) for i in range(n - 1))
    return Graph.from_edges(n, sorted(edges))


@pytest.fixture
def write_text(tmp_path):
    def _write(name: str, text: str):
        p = tmp_path / name
        p.write_text(text)
        return p
    return _write


def grad_check(params, config, nodes, rows, positives, negatives, eps=1e-4):
    """Worst relative error between backward and central differences over every coordinate."""
    from anembed.model import backward_batch, forward_batch, sampled_loss

    trace = forward_batch(params, config, nodes, rows)
    analytic = backward_batch(params, config, trace, positives, negatives).dense(params)
    worst = 0.0
    for theta, g in zip(params.arrays(), analytic.arrays()):
        flat, gflat = theta.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = sampled_loss(params, config, nodes, rows, positives, negatives)
            flat[i] = old - eps
            down = sampled_loss(params, config, nodes, rows, positives, negatives)
            flat[i] = old
            num = (up - down) / (2 * eps)
            denom = max(abs(num), abs(gflat[i]), 1e-7)
            worst = max(worst, abs(num - gflat[i]) / denom)
    return worst


# one status line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
