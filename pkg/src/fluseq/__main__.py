import sys

from fluseq.cli import main

sys.exit(main())
