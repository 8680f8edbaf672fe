"""Minimal SVG line charts for training curves."""
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
PANEL_W, PANEL_H = 640, 220
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 120, 28, 36


def _fmt(v):
    if v == 0:
        return "0"
    if abs(v) >= 1e3 or abs(v) < 1e-2:
        return f"{v:.1e}"
    return f"{v:.3g}"


def _panel(title, series, top):
    xs = [x for pts in series.values() for x in pts[0]]
    ys = [y for pts in series.values() for y in pts[1]]
    out = [f'<g transform="translate(0,{top})">',
           f'<text x="{MARGIN_L}" y="18" font-size="14" font-family="sans-serif">{escape(title)}</text>']
    if not xs:
        out.append(f'<text x="{MARGIN_L}" y="60" font-size="12">no data</text></g>')
        return out
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = PANEL_W - MARGIN_L - MARGIN_R, PANEL_H - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN_T + ph - (y - y0) / (y1 - y0) * ph

    base = MARGIN_T + ph
    out.append(f'<line x1="{MARGIN_L}" y1="{base}" x2="{MARGIN_L + pw}" y2="{base}" stroke="black"/>')
    out.append(f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{base}" stroke="black"/>')
    for i in range(5):
        fy = y0 + (y1 - y0) * i / 4
        fx = x0 + (x1 - x0) * i / 4
        out.append(f'<text x="{MARGIN_L - 6}" y="{py(fy) + 4:.1f}" font-size="10" text-anchor="end">{_fmt(fy)}</text>')
        out.append(f'<text x="{px(fx):.1f}" y="{base + 14}" font-size="10" text-anchor="middle">{_fmt(fx)}</text>')
    for k, (label, (sx, sy)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(sx, sy))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = MARGIN_T + 14 * k + 8
        out.append(f'<text x="{MARGIN_L + pw + 10}" y="{ly}" font-size="11" fill="{color}">{escape(str(label))}</text>')
    out.append("</g>")
    return out


def curves_svg(panels, note=""):
    """panels: list of (title, {label: (xs, ys)}). Returns SVG text."""
    height = PANEL_H * len(panels) + (20 if note else 0)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{height}" '
           f'viewBox="0 0 {PANEL_W} {height}">',
           '<rect width="100%" height="100%" fill="white"/>']
    if note:
        out.append(f"<!-- {escape(note)} -->")
    for i, (title, series) in enumerate(panels):
        out.extend(_panel(title, series, i * PANEL_H))
    if note:
        out.append(f'<text x="4" y="{height - 6}" font-size="9" fill="#666">{escape(note)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def training_curves(histories, note=""):
    """histories: list of (fold, History)."""
    lr, loss, val = {}, {}, {}
    for fold, h in histories:
        ep = [r["epoch"] for r in h.rows]
        lr[f"fold {fold}"] = (list(range(len(h.lr_trace))), h.lr_trace)
        loss[f"fold {fold}"] = (ep, [r["train_loss"] for r in h.rows])
        val[f"fold {fold}"] = (ep, [r["val_iou"] for r in h.rows])
    return curves_svg([("learning rate per iteration", lr), ("training loss per epoch", loss),
                       ("validation IoU per epoch", val)], note)
