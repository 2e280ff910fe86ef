"""Time and peak memory of a single decoupled step as the bag grows.

    python3 demos/scaling.py [out_dir]
"""

import sys
from pathlib import Path

from tapfm.probes import scaling_probe

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

report = scaling_probe([8, 16, 32, 64, 128])
print(f"{'K':>5} {'seconds':>9} {'peak MiB':>9} {'forward work':>13}")
for r in report.rows:
    print(f"{r.K:5d} {r.seconds:9.4f} {r.peak_bytes / 2**20:9.2f} {r.forward_work:13d}")
t, m = report.time_fit, report.memory_fit
print(f"time   ~ {t.a:.4f} + {t.b:.5f} K   (R^2 {t.r2:.4f})")
print(f"memory ~ {m.a / 2**20:.2f} MiB + {m.b / 2**10:.1f} KiB K   (R^2 {m.r2:.4f})")
report.write_csv(out / "scaling.csv")
report.write_json(out / "scaling.json")
