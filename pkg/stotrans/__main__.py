# stotrans/__main__.py

import sys

from stotrans.main import main

sys.exit(main())
