from kpasim.cli import main
import sys

sys.exit(main())
