"""命令行入口：python app.py <synth|train|eval|predict|curves> ..."""

import sys

from lineTransformer.cli import main

if __name__ == "__main__":
    sys.exit(main())
