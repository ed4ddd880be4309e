"""Minimal static SVG line charts (mean line + credible ribbon), no deps."""


def _fmt(x):
    return f"{x:.2f}"


def line_chart_svg(dates, mean, lo, hi, title, width=840, height=320):
    """Polyline chart over day offsets; values expected in [0, 1]."""
    pad_l, pad_r, pad_t, pad_b = 50, 15, 30, 30
    iw = width - pad_l - pad_r
    ih = height - pad_t - pad_b
    x0, x1 = float(dates[0]), float(dates[-1])
    span = (x1 - x0) or 1.0
    top = max(max(hi), 1e-9)

    def sx(d):
        return pad_l + iw * (float(d) - x0) / span

    def sy(v):
        return pad_t + ih * (1.0 - float(v) / top)

    ribbon = " ".join(f"{_fmt(sx(d))},{_fmt(sy(v))}" for d, v in zip(dates, hi))
    ribbon += " " + " ".join(
        f"{_fmt(sx(d))},{_fmt(sy(v))}" for d, v in zip(reversed(dates), reversed(lo))
    )
    line = " ".join(f"{_fmt(sx(d))},{_fmt(sy(v))}" for d, v in zip(dates, mean))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<text x="{pad_l}" y="18" font-family="sans-serif" font-size="14">{title}</text>\n'
        f'<polygon points="{ribbon}" fill="#b0c4de" fill-opacity="0.6" stroke="none"/>\n'
        f'<polyline points="{line}" fill="none" stroke="#1f3a5f" stroke-width="1.5"/>\n'
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>\n'
        f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>\n'
        f'<text x="8" y="{pad_t + 5}" font-family="sans-serif" font-size="11">{top:.3f}</text>\n'
        f'<text x="8" y="{height - pad_b}" font-family="sans-serif" font-size="11">0</text>\n'
        f"</svg>\n"
    )
