"""Process-wide runtime knobs (thread caps, seeding helpers)."""

import os

import torch


def thread_count():
    """Worker cap from N2N_THREADS, defaulting to min(4, cpu count)."""
    env = os.environ.get("N2N_THREADS", "").strip()
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"N2N_THREADS must be >= 1, got {env!r}")
        return n
    return min(4, os.cpu_count() or 1)


def configure_torch_threads():
    torch.set_num_threads(thread_count())


def derive_seed(seed, stream):
    """Stable per-stream sub-seed so all randomness funnels through one seed."""
    return (int(seed) * 1_000_003 + int(stream) * 97 + 17) % (2**31 - 1)
