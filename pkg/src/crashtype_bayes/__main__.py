import sys

from crashtype_bayes.cli import main

sys.exit(main())
