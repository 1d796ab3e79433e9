from superfed.cli import main
import sys
sys.exit(main())
