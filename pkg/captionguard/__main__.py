import sys

from captionguard.cli import main

sys.exit(main())
