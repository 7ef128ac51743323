# Copyright The SVBI Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License"). You
# may not use this file except in compliance with the License. A copy of
# the License is located at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# or in the "license" file accompanying this file. This file is
# distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF
# ANY KIND, either express or implied. See the License for the specific
# language governing permissions and limitations under the License.
"""Plot rate-distortion curves from the CSV written by ``svbi sweep`` or ``svbi eval-rd``.

.. code-block:: bash

    python scripts/plot_rd.py out/reports/rd.csv --out out/reports/rd.png

Requires the ``plot`` extra.
"""
import argparse
import logging

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)


def plot_rd(csv_paths, out_path, title=None):
    frame = pd.concat([pd.read_csv(p) for p in csv_paths], ignore_index=True)
    summary = (
        frame.groupby(["objective", "beta"])
        .agg(bpp=("bpp", "mean"), predictive_loss=("predictive_loss", "mean"), loss_std=("predictive_loss", "std"))
        .reset_index()
    )
    fig, ax = plt.subplots(figsize=(6, 4))
    for objective, group in summary.groupby("objective"):
        group = group.sort_values("bpp")
        ax.errorbar(
            group["bpp"],
            group["predictive_loss"],
            yerr=group["loss_std"].fillna(0.0),
            marker="o",
            capsize=3,
            label=objective,
        )
    ax.axhline(0.4, color="grey", linestyle="--", linewidth=0.8)
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("predictive loss (top-1 points)")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    logger.info("Wrote %s from %d rows", out_path, len(frame))
    return out_path


def main():
    parser = argparse.ArgumentParser(description="Plot rate-distortion curves")
    parser.add_argument("csv", nargs="+", help="RD CSV files")
    parser.add_argument("--out", default="rd.png")
    parser.add_argument("--title", default=None)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO)
    plot_rd(args.csv, args.out, args.title)


if __name__ == "__main__":
    main()
