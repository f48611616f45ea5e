import sys

from cloudalign.cli import main

sys.exit(main())
