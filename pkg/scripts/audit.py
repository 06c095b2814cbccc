"""Model-level audits: env vs straight-line cross-check, oracle lower bounds, gradient check."""

import sys

from dhvo.harness import main

if __name__ == "__main__":
    code = main(["oracle-check", "--trials", "1000", "--fixtures", "20", "--refine", "3"])
    code = max(code, main(["gradcheck", "--fixtures", "20"]))
    sys.exit(code)
