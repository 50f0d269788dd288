from windcast.cli import main
import sys

sys.exit(main())
