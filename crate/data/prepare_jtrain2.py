"""Build data/jtrain2.csv from the `wooldridge` package copy of jtrain2.

Columns written, in order:
  train, mostrn, re78, age, agesq, educ, black, hisp, married, nodegr,
  re74, re74sq, re75, unemp74, unemp75, u74hisp

Earnings are left in the source units (thousands of 1982 dollars).
`re74sq` is re74 squared and `u74hisp` is unemp74 * hisp. No other
transformation is applied.

    pip install wooldridge
    python data/prepare_jtrain2.py
"""

from pathlib import Path

import wooldridge


def main() -> None:
    df = wooldridge.data("jtrain2")
    out = df[["train", "mostrn", "re78", "age", "agesq", "educ", "black", "hisp", "married"]].copy()
    out["nodegr"] = df["nodegree"]
    out["re74"] = df["re74"]
    out["re74sq"] = df["re74"] ** 2
    out["re75"] = df["re75"]
    out["unemp74"] = df["unem74"]
    out["unemp75"] = df["unem75"]
    out["u74hisp"] = df["unem74"] * df["hisp"]
    path = Path(__file__).with_name("jtrain2.csv")
    out.to_csv(path, index=False, float_format="%.10g")
    print(f"wrote {len(out)} rows to {path}")


if __name__ == "__main__":
    main()
