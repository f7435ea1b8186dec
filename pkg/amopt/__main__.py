import sys

from amopt.main import main

sys.exit(main())
