# Timeline figures: ground truth track above one track per detection source
import csv
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .schemas import Detection, VideoRecord  # noqa: E402

GROUND_TRUTH_TRACK = "ground truth"
TIMELINE_FIELDS = ["track", "video_id", "class", "start", "end", "confidence"]
TRACK_HEIGHT = 0.8

# fixed salt and no creation date keep the SVG byte-identical across runs
SVG_RC = {"svg.hashsalt": "actiongraph", "svg.fonttype": "none"}


def class_color(class_id: int) -> Tuple[float, float, float, float]:
    return matplotlib.colormaps["tab20"](class_id % 20)


def timeline_rows(record: VideoRecord, sources: Mapping[str, Sequence[Detection]]) -> List[dict]:
    rows = [
        {
            "track": GROUND_TRUTH_TRACK,
            "video_id": record.video_id,
            "class": gt.label,
            "start": gt.start,
            "end": gt.end,
            "confidence": "",
        }
        for gt in sorted(record.ground_truth, key=lambda gt: (gt.start, gt.label))
    ]
    for name, detections in sources.items():
        for det in sorted(detections, key=lambda det: (det.start, det.class_id)):
            if det.video_id != record.video_id:
                continue
            rows.append(
                {
                    "track": name,
                    "video_id": det.video_id,
                    "class": det.class_id,
                    "start": det.start,
                    "end": det.end,
                    "confidence": det.confidence,
                }
            )
    return rows


def plot_timeline(
    record: VideoRecord,
    class_names: Sequence[str],
    sources: Mapping[str, Sequence[Detection]],
    out_path: Union[str, Path],
) -> Tuple[Path, Path]:
    """
    Render `out_path` (SVG) and a CSV with the same intervals next to it.
    """
    out_path = Path(out_path).with_suffix(".svg")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = timeline_rows(record, sources)
    tracks = [GROUND_TRUTH_TRACK, *sources]

    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(10, 1.0 + 0.6 * len(tracks)))
        seen: Dict[int, None] = {}
        for row in rows:
            level = len(tracks) - 1 - tracks.index(row["track"])
            ax.broken_barh(
                [(row["start"], row["end"] - row["start"])],
                (level - TRACK_HEIGHT / 2, TRACK_HEIGHT),
                facecolors=class_color(row["class"]),
                edgecolors="black",
                linewidth=0.5,
            )
            seen.setdefault(row["class"])
        ax.set_xlim(0.0, record.duration)
        ax.set_ylim(-0.5, len(tracks) - 0.5)
        ax.set_yticks(range(len(tracks)))
        ax.set_yticklabels(list(reversed(tracks)))
        ax.set_xlabel("time (s)")
        ax.set_title(record.video_id)
        handles = [
            plt.Rectangle((0, 0), 1, 1, facecolor=class_color(cls), edgecolor="black")
            for cls in sorted(seen)
        ]
        if handles:
            ax.legend(handles, [class_names[cls] for cls in sorted(seen)], loc="upper right", fontsize=7)
        fig.tight_layout()
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)

    csv_path = out_path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=TIMELINE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return out_path, csv_path
