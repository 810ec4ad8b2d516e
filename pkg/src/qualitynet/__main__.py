import sys

from qualitynet.cli import main

sys.exit(main())
