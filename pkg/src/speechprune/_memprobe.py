"""Run one forward pass in a fresh process and report peak RSS.

Invoked as `python -m speechprune._memprobe <checkpoint> <batch> <seq_len>
[seed]` by the benchmark harness; prints a single JSON line. Lives in its
own module so the parent process's allocator state can't contaminate the
measurement.
"""

import json
import resource
import sys


def _peak_rss_kib() -> int:
    # ru_maxrss is inherited across fork and survives exec, so a probe
    # spawned from a large parent would report the parent's footprint.
    # VmHWM belongs to this process's own address space (it resets on
    # exec), so prefer it and keep ru_maxrss as a non-Linux fallback.
    try:
        with open("/proc/self/status") as f:
            for line in f:
                if line.startswith("VmHWM:"):
                    return int(line.split()[1])
    except OSError:
        pass
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)


def main() -> int:
    if len(sys.argv) < 4:
        print("usage: python -m speechprune._memprobe CKPT BATCH SEQ_LEN [SEED]",
              file=sys.stderr)
        return 2
    ckpt, batch, seq_len = sys.argv[1], int(sys.argv[2]), int(sys.argv[3])
    seed = int(sys.argv[4]) if len(sys.argv) > 4 else 0

    import torch

    from .checkpoint import load_checkpoint

    model, _, _ = load_checkpoint(ckpt)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, seq_len, model.config.d_model, generator=g)
    with torch.no_grad():
        model(x)
    print(json.dumps({"peak_rss_kib": _peak_rss_kib()}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
