import json
import logging
from pathlib import Path

import pandas as pd

from economics.services.market import derive_market, reference_prices
from simulation.services.config import load_config
from simulation.services.runlog import CONFIG_SNAPSHOT, ROUNDS_LOG, SUMMARY_FILE, RunLogError, read_log, resolve_run_dir

logger = logging.getLogger(__name__)

EXPORT_COLUMNS = ["round", "price1", "price2", "pB", "pM"]


def price_frame(path: str | Path) -> tuple[pd.DataFrame, dict]:
    """Plot-ready prices for one run plus its summary document.

    pB and pM are the firm-1 reference prices; pM is blank when the cartel
    price is undefined.
    """
    run_dir = resolve_run_dir(path)
    lines = read_log(run_dir / ROUNDS_LOG)
    if not lines:
        raise RunLogError(f"{run_dir / ROUNDS_LOG} holds no rounds")
    config = load_config(run_dir / CONFIG_SNAPSHOT)
    refs = reference_prices(derive_market(config.market))

    frame = pd.DataFrame([{"round": line.round, "firm": line.firm, "price": line.price} for line in lines])
    if frame.duplicated(["round", "firm"]).any():
        raise RunLogError("log holds more than one line for a firm in some round")
    wide = frame.pivot(index="round", columns="firm", values="price").sort_index()
    if wide.isna().any().any():
        raise RunLogError("log is missing a firm's price in some round")

    prices = pd.DataFrame(
        {
            "round": wide.index.astype(int),
            "price1": wide[1].to_numpy(),
            "price2": wide[2].to_numpy(),
            "pB": refs.bertrand[0],
            "pM": refs.cartel[0] if refs.cartel is not None else None,
        }
    )[EXPORT_COLUMNS]

    summary_path = run_dir / SUMMARY_FILE
    recorded = json.loads(summary_path.read_text(encoding="utf-8")) if summary_path.exists() else {}
    summary = {
        "run_id": config.run_id,
        "rounds": len(prices),
        "verdicts": recorded.get("verdicts", []),
        "formed_at": recorded.get("collusion_formed_at"),
        "reference_prices": {
            "bertrand": list(refs.bertrand),
            "cartel": list(refs.cartel) if refs.cartel is not None else None,
        },
    }
    return prices, summary


def export_run(path: str | Path, out_path: str | Path) -> tuple[Path, Path]:
    """Write `<out>.csv` (RFC 4180) and `<out>.summary.json`."""
    prices, summary = price_frame(path)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_path if out_path.suffix == ".csv" else out_path.with_suffix(".csv")
    summary_path = csv_path.with_name(f"{csv_path.stem}.summary.json")
    prices.to_csv(csv_path, index=False, lineterminator="\r\n")
    with summary_path.open("w", encoding="utf-8") as handle:
        json.dump(summary, handle, indent=2, ensure_ascii=False)
        handle.write("\n")
    logger.info("[Export] %s rounds -> %s", len(prices), csv_path)
    return csv_path, summary_path
